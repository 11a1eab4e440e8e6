"""
Line-delimited JSON run traces: one header record, then one record per simulation step
"""

import json
import logging
import os
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.errors import ConfigurationError

logger = logging.getLogger(__name__)


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


class TraceWriter:
    def __init__(self, path: Optional[str] = None, batch_size: int = 100):
        """
        Collect trace records in memory and optionally stream them to a file

        Args:
            path (str): JSON-lines file to write; in-memory only when None
            batch_size (int): Records buffered between writes
        """
        self.path = path
        self.batch_size = batch_size
        self.records: List[Dict[str, Any]] = []
        self._pending: List[str] = []
        self._file = None
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            self._file = open(path, "w")

    def write(self, record: Dict[str, Any]):
        self.records.append(record)
        if self._file is None:
            return
        self._pending.append(json.dumps(record, default=_jsonable))
        if len(self._pending) >= self.batch_size:
            self.flush()

    def flush(self):
        if self._file is not None and self._pending:
            self._file.write("\n".join(self._pending) + "\n")
            self._file.flush()
            self._pending = []

    def close(self):
        if self._file is None:
            return
        self.flush()
        self._file.close()
        self._file = None
        logger.info(f"Saved {len(self.records)} trace records to {self.path}")

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


def split_trace(records: List[Dict[str, Any]]) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    """(header, step records) of an in-memory trace"""
    if not records or records[0].get("record") != "header":
        raise ConfigurationError("trace", "trace must start with a header record")
    return records[0], [r for r in records[1:] if r.get("record") == "step"]


def read_trace(path: str) -> List[Dict[str, Any]]:
    """
    Load a trace file

    Args:
        path (str): JSON-lines trace

    Returns:
        List[Dict]: Header followed by the step records
    """
    records = []
    with open(path, "r") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"trace line {line_no}", str(e)) from e
    split_trace(records)
    logger.info(f"Loaded {len(records)} trace records from {path}")
    return records
