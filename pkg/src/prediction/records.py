"""
Line-delimited prediction records: export for offline inspection and import so that
externally produced predictions can replace the synthetic predictor
"""

import json
import logging
import os
from collections import defaultdict
from typing import Dict, Iterable, List

import numpy as np

from src.errors import ConfigurationError, ContractError
from src.prediction.gmm_predictor import ModePrediction, PredictionSet, Scene
from src.world.path_world import Dimensions

logger = logging.getLogger(__name__)

RECORD_FIELDS = ("tp_id", "mode_id", "k", "mu_x", "mu_y", "psi", "v", "s11", "s12", "s22", "pi")


def prediction_records(pset: PredictionSet, cycle: int = 0) -> Iterable[dict]:
    yield {
        "record": "header",
        "cycle": cycle,
        "horizon": pset.horizon,
        "dt": pset.dt,
        "participants": [
            {"tp_id": tp_id, "length": d.length, "width": d.width} for tp_id, d in zip(pset.tp_ids, pset.dims)
        ],
    }
    for tp_id, modes in zip(pset.tp_ids, pset.modes):
        for mode in modes:
            for k in range(mode.horizon):
                yield {
                    "record": "prediction",
                    "cycle": cycle,
                    "tp_id": tp_id,
                    "mode_id": mode.mode_id,
                    "k": k,
                    "mu_x": float(mode.mu[k, 0]),
                    "mu_y": float(mode.mu[k, 1]),
                    "psi": float(mode.psi[k]),
                    "v": float(mode.v[k]),
                    "s11": float(mode.cov[k, 0, 0]),
                    "s12": float(mode.cov[k, 0, 1]),
                    "s22": float(mode.cov[k, 1, 1]),
                    "pi": mode.prob,
                    "label": mode.label,
                }


def write_predictions(path: str, pset: PredictionSet, cycle: int = 0, append: bool = False):
    """
    Write one prediction set as JSON lines (a header record, then one record per tp/mode/step)

    Args:
        path (str): Output file
        pset (PredictionSet): Predictions to write
        cycle (int): Planning cycle the predictions belong to
        append (bool): Append to an existing file instead of overwriting it
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    count = 0
    with open(path, "a" if append else "w") as f:
        for record in prediction_records(pset, cycle):
            f.write(json.dumps(record) + "\n")
            count += 1
    logger.debug(f"Saved {count} prediction records to {path}")


def _assemble(header: dict, rows: List[dict]) -> PredictionSet:
    horizon = int(header["horizon"])
    by_mode: Dict[tuple, List[dict]] = defaultdict(list)
    for row in rows:
        missing = [f for f in RECORD_FIELDS if f not in row]
        if missing:
            raise ConfigurationError("predictions", f"record missing fields {missing}")
        by_mode[(int(row["tp_id"]), int(row["mode_id"]))].append(row)

    tp_ids, dims, modes = [], [], []
    for p in header["participants"]:
        tp_id = int(p["tp_id"])
        tp_ids.append(tp_id)
        dims.append(Dimensions(float(p["length"]), float(p["width"])))
        tp_modes = []
        for (tid, mode_id), mode_rows in sorted(by_mode.items()):
            if tid != tp_id:
                continue
            mode_rows.sort(key=lambda r: int(r["k"]))
            if [int(r["k"]) for r in mode_rows] != list(range(horizon)):
                raise ContractError(f"participant {tp_id} mode {mode_id} does not cover steps 0..{horizon - 1}")
            table = np.array([[r[f] for f in RECORD_FIELDS[3:]] for r in mode_rows], dtype=float)
            cov = np.empty((horizon, 2, 2))
            cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 0], cov[:, 1, 1] = table[:, 4], table[:, 5], table[:, 5], table[:, 6]
            tp_modes.append(
                ModePrediction(
                    mode_id, float(mode_rows[0]["pi"]), table[:, 0:2], cov, table[:, 2], table[:, 3], mode_rows[0].get("label", "")
                )
            )
        modes.append(tp_modes)
    pset = PredictionSet(modes, horizon, float(header["dt"]), tp_ids=tp_ids, dims=dims)
    pset.validate()
    return pset


def read_predictions(path: str) -> Dict[int, PredictionSet]:
    """
    Load every prediction set of a records file, keyed by planning cycle

    Raises:
        ConfigurationError: if the file is missing or a record cannot be parsed
        ContractError: if an assembled set violates the prediction invariants
    """
    if not os.path.exists(path):
        raise ConfigurationError("predictions", f"file not found: {path}")
    headers: Dict[int, dict] = {}
    rows: Dict[int, List[dict]] = defaultdict(list)
    with open(path, "r") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConfigurationError("predictions", f"{path}:{line_no}: {e}") from e
            cycle = int(record.get("cycle", 0))
            if record.get("record") == "header":
                headers[cycle] = record
            else:
                rows[cycle].append(record)
    sets = {cycle: _assemble(header, rows[cycle]) for cycle, header in sorted(headers.items())}
    logger.info(f"Loaded {len(sets)} prediction sets from {path}")
    return sets


class FilePredictor:
    def __init__(self, path: str):
        """
        Replays predictions from a records file; the set of the latest cycle not after
        the scene's cycle is returned

        Args:
            path (str): Records file written by ``write_predictions``
        """
        self.path = path
        self.sets = read_predictions(path)
        if not self.sets:
            raise ConfigurationError("predictions", f"no prediction sets in {path}")

    def predict(self, scene: Scene, horizon: int, dt: float) -> PredictionSet:
        cycles = [c for c in self.sets if c <= scene.cycle]
        pset = self.sets[max(cycles) if cycles else min(self.sets)]
        if pset.horizon != horizon or abs(pset.dt - dt) > 1e-12:
            raise ContractError(f"file predictions have N={pset.horizon}, dt={pset.dt}; planner expects N={horizon}, dt={dt}")
        return pset
