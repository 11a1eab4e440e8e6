"""
Geometry of the driving world: arclength-parameterized reference paths with road
boundaries, oriented rectangle footprints and the contouring/lag error
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, Sequence, Tuple, Union

import numpy as np

from src.errors import ContractError, DomainError

logger = logging.getLogger(__name__)

DEFAULT_DS_MAX = 0.5

BoundarySpec = Union[float, Callable[[np.ndarray], np.ndarray]]


def wrap_angle(angle):
    """Wrap an angle (scalar or array) to [-pi, pi)"""
    return (np.asarray(angle) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    psi: float


@dataclass(frozen=True)
class Dimensions:
    """Length and width of a vehicle body in meters"""

    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ContractError(f"dimensions must be positive, got {self.length} x {self.width}")

    @property
    def diagonal(self) -> float:
        return math.hypot(self.length, self.width)


@dataclass(frozen=True)
class RectFootprint:
    """Oriented rectangle: center, heading (rad), length along heading, width across it"""

    center_x: float
    center_y: float
    heading: float
    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ContractError(f"footprint must have positive size, got {self.length} x {self.width}")

    @classmethod
    def at(cls, x: float, y: float, heading: float, dims: Dimensions) -> "RectFootprint":
        return cls(float(x), float(y), float(heading), dims.length, dims.width)

    def axes(self) -> np.ndarray:
        """Unit vectors of the body frame as rows (longitudinal, lateral)"""
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([[c, s], [-s, c]])

    def corners(self) -> np.ndarray:
        axes = self.axes()
        hl, hw = self.length / 2.0, self.width / 2.0
        center = np.array([self.center_x, self.center_y])
        signs = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]], dtype=float)
        return center + signs[:, :1] * hl * axes[0] + signs[:, 1:] * hw * axes[1]

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points (..., 2) lying inside or on the rectangle"""
        local = to_local_frame(points, self.center_x, self.center_y, self.heading)
        return (np.abs(local[..., 0]) <= self.length / 2.0) & (np.abs(local[..., 1]) <= self.width / 2.0)


def to_local_frame(points: np.ndarray, cx, cy, heading) -> np.ndarray:
    """Express points (..., 2) in a frame located at (cx, cy) rotated by heading"""
    points = np.asarray(points, dtype=float)
    dx = points[..., 0] - cx
    dy = points[..., 1] - cy
    c, s = np.cos(heading), np.sin(heading)
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


@dataclass(frozen=True)
class PathQuery:
    """Batched path lookup: interpolated values plus their arclength derivatives"""

    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    d_lb: np.ndarray
    d_rb: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    dpsi: np.ndarray
    dd_lb: np.ndarray
    dd_rb: np.ndarray


class ReferencePath:
    def __init__(
        self,
        theta: Sequence[float],
        x: Sequence[float],
        y: Sequence[float],
        psi: Sequence[float],
        d_lb: Sequence[float],
        d_rb: Sequence[float],
        lane_markers: Iterable[float] = (),
        ds_max: float = DEFAULT_DS_MAX,
        name: str = "",
    ):
        """
        Arclength-parameterized centerline with left/right boundary distances

        Args:
            theta: Arclength of every sample, strictly increasing from 0
            x, y: Centerline position of every sample (m)
            psi: Centerline heading of every sample (rad)
            d_lb, d_rb: Distance to the left/right road boundary (m), positive
            lane_markers: Signed lateral offsets of lane markers from the centerline (m)
            ds_max: Largest allowed spacing between consecutive samples (m)
            name: Label used in log messages
        """
        self.name = name
        self.ds_max = float(ds_max)
        arrays = [np.array(v, dtype=float) for v in (theta, x, y, psi, d_lb, d_rb)]
        self._theta, self._x, self._y, self._psi, self._d_lb, self._d_rb = arrays
        self.lane_markers = tuple(float(m) for m in lane_markers)
        self._validate()
        steps = wrap_angle(np.diff(self._psi))
        self._psi_unwrapped = self._psi[0] + np.concatenate([[0.0], np.cumsum(steps)])
        for arr in (*arrays, self._psi_unwrapped):
            arr.setflags(write=False)

    def _validate(self):
        n = self._theta.size
        if n < 2:
            raise ContractError("reference path needs at least two samples")
        if any(a.shape != (n,) for a in (self._x, self._y, self._psi, self._d_lb, self._d_rb)):
            raise ContractError("reference path sample arrays must have equal length")
        if abs(self._theta[0]) > 1e-9:
            raise ContractError(f"reference path must start at theta=0, got {self._theta[0]}")
        spacing = np.diff(self._theta)
        if np.any(spacing <= 0):
            raise ContractError("reference path arclength must be strictly increasing")
        if np.any(spacing > self.ds_max + 1e-9):
            raise ContractError(f"sample spacing {spacing.max():.3f} m exceeds ds_max={self.ds_max} m")
        if np.any(self._d_lb <= 0) or np.any(self._d_rb <= 0):
            raise ContractError("road boundaries must be on both sides (d_lb > 0, d_rb > 0)")
        if np.any(np.abs(wrap_angle(np.diff(self._psi))) >= np.pi):
            raise ContractError("reference heading jumps by pi or more between samples")

    @property
    def theta_max(self) -> float:
        return float(self._theta[-1])

    @property
    def thetas(self) -> np.ndarray:
        return self._theta

    @property
    def points(self) -> np.ndarray:
        return np.stack([self._x, self._y], axis=-1)

    @property
    def samples(self) -> List[Tuple[float, float, float, float, float, float]]:
        return [
            tuple(float(v) for v in row)
            for row in zip(self._theta, self._x, self._y, self._psi, self._d_lb, self._d_rb)
        ]

    def __len__(self) -> int:
        return int(self._theta.size)

    def __repr__(self) -> str:
        return f"ReferencePath(name={self.name!r}, samples={len(self)}, theta_max={self.theta_max:.1f})"

    def query(self, theta) -> PathQuery:
        """
        Interpolate the path at arclength(s), clamping to [0, theta_max]

        Args:
            theta: Scalar or array of arclengths

        Returns:
            PathQuery: Interpolated values and derivatives with the shape of ``theta``
        """
        th = np.clip(np.asarray(theta, dtype=float), 0.0, self.theta_max)
        i = np.clip(np.searchsorted(self._theta, th, side="right") - 1, 0, self._theta.size - 2)
        t0 = self._theta[i]
        span = self._theta[i + 1] - t0
        t = (th - t0) / span

        def lerp(values):
            a, b = values[i], values[i + 1]
            return (1.0 - t) * a + t * b, (b - a) / span

        x, dx = lerp(self._x)
        y, dy = lerp(self._y)
        psi, dpsi = lerp(self._psi_unwrapped)
        d_lb, dd_lb = lerp(self._d_lb)
        d_rb, dd_rb = lerp(self._d_rb)
        return PathQuery(x, y, psi, d_lb, d_rb, dx, dy, dpsi, dd_lb, dd_rb)

    def project(self, x, y) -> np.ndarray:
        """Arclength of the closest centerline point for each query point"""
        px = np.atleast_1d(np.asarray(x, dtype=float))[:, None]
        py = np.atleast_1d(np.asarray(y, dtype=float))[:, None]
        ax, ay = self._x[:-1], self._y[:-1]
        sx, sy = np.diff(self._x), np.diff(self._y)
        seg_len2 = np.maximum(sx * sx + sy * sy, 1e-12)
        t = np.clip(((px - ax) * sx + (py - ay) * sy) / seg_len2, 0.0, 1.0)
        dist2 = (ax + t * sx - px) ** 2 + (ay + t * sy - py) ** 2
        j = np.argmin(dist2, axis=1)
        rows = np.arange(j.size)
        theta = self._theta[j] + t[rows, j] * np.diff(self._theta)[j]
        return theta if np.ndim(x) else float(theta[0])

    def distance_to(self, x, y) -> np.ndarray:
        """Euclidean distance from points to the centerline"""
        theta = self.project(x, y)
        q = self.query(theta)
        return np.hypot(np.asarray(x) - q.x, np.asarray(y) - q.y)

    @classmethod
    def from_file(
        cls, path: str, lane_markers: Iterable[float] = (), ds_max: float = DEFAULT_DS_MAX
    ) -> "ReferencePath":
        """
        Load a path fixture: one record per line ``theta x y psi d_lb d_rb``

        Fields may be separated by whitespace or commas; ``#`` starts a comment.
        """
        rows = []
        with open(path, "r") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                fields = line.replace(",", " ").split()
                if len(fields) != 6:
                    raise ContractError(f"{path}:{line_no}: expected 6 fields, got {len(fields)}")
                rows.append([float(v) for v in fields])
        if not rows:
            raise ContractError(f"{path}: no path samples found")
        data = np.array(rows)
        logger.info(f"Loaded {len(rows)} path samples from {path}")
        return cls(*data.T, lane_markers=lane_markers, ds_max=ds_max, name=path)

    def to_file(self, path: str):
        with open(path, "w") as f:
            f.write("# theta x y psi d_lb d_rb\n")
            for row in self.samples:
                f.write(" ".join(f"{v:.9f}" for v in row) + "\n")


def query_path(path: ReferencePath, theta: float) -> Tuple[Pose, float, float]:
    """
    Reference pose and boundary distances at arclength ``theta``

    Raises:
        DomainError: if theta lies outside [0, theta_max]
    """
    if not 0.0 <= theta <= path.theta_max:
        raise DomainError(f"theta={theta} outside [0, {path.theta_max}]")
    q = path.query(theta)
    pose = Pose(float(q.x), float(q.y), float(wrap_angle(q.psi)))
    return pose, float(q.d_lb), float(q.d_rb)


def contour_lag_arrays(q: PathQuery, x, y) -> Tuple[np.ndarray, np.ndarray]:
    """Contouring and lag error for already-queried reference points"""
    sin_p, cos_p = np.sin(q.psi), np.cos(q.psi)
    ex = np.asarray(x) - q.x
    ey = np.asarray(y) - q.y
    e_c = sin_p * ex - cos_p * ey
    e_l = -cos_p * ex - sin_p * ey
    return e_c, e_l


def contour_lag_errors(path: ReferencePath, x: float, y: float, theta: float) -> Tuple[float, float]:
    """
    Contouring error (lateral, positive to the right) and lag error (positive behind the reference)

    Raises:
        DomainError: if theta lies outside [0, theta_max]
    """
    if not 0.0 <= theta <= path.theta_max:
        raise DomainError(f"theta={theta} outside [0, {path.theta_max}]")
    e_c, e_l = contour_lag_arrays(path.query(theta), x, y)
    return float(e_c), float(e_l)


def rect_overlap(a: RectFootprint, b: RectFootprint) -> bool:
    """Separating-axis test over the edge normals of both rectangles; touching counts as overlap"""
    ca, cb = a.corners(), b.corners()
    for axis in np.vstack([a.axes(), b.axes()]):
        pa, pb = ca @ axis, cb @ axis
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


def segments_hit_rects(p1, p2, cx, cy, heading, length, width) -> np.ndarray:
    """
    Vectorized segment-vs-oriented-rectangle test (slab method in the rectangle frame)

    All arguments broadcast against each other; points have a trailing axis of size 2.
    """
    q1 = to_local_frame(p1, cx, cy, heading)
    q2 = to_local_frame(p2, cx, cy, heading)
    d = q2 - q1
    half = np.stack(np.broadcast_arrays(np.asarray(length) / 2.0, np.asarray(width) / 2.0), axis=-1)
    shape = np.broadcast_shapes(q1.shape, half.shape)
    q1, d, half = (np.broadcast_to(a, shape) for a in (q1, d, half))
    t_lo = np.zeros(shape[:-1])
    t_hi = np.ones(shape[:-1])
    hit = np.ones(shape[:-1], dtype=bool)
    for axis in range(2):
        di, qi, hi = d[..., axis], q1[..., axis], half[..., axis]
        parallel = np.abs(di) < 1e-12
        hit &= ~(parallel & (np.abs(qi) > hi))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = np.where(parallel, -np.inf, (-hi - qi) / di)
            tb = np.where(parallel, np.inf, (hi - qi) / di)
        t_lo = np.maximum(t_lo, np.minimum(ta, tb))
        t_hi = np.minimum(t_hi, np.maximum(ta, tb))
    return hit & (t_lo <= t_hi)


def segment_hits_rect(p1, p2, r: RectFootprint) -> bool:
    """True iff the segment p1 -> p2 intersects the rectangle"""
    return bool(segments_hit_rects(p1, p2, r.center_x, r.center_y, r.heading, r.length, r.width))


def _boundary(spec: BoundarySpec, theta: np.ndarray) -> np.ndarray:
    if callable(spec):
        return np.asarray(spec(theta), dtype=float)
    return np.full_like(theta, float(spec))


def build_path(
    start: Tuple[float, float],
    heading: float,
    segments: Sequence[tuple],
    d_lb: BoundarySpec,
    d_rb: BoundarySpec,
    ds: float = 0.25,
    lane_markers: Iterable[float] = (),
    name: str = "",
) -> ReferencePath:
    """
    Sample a path made of straight lines and circular arcs exactly

    Args:
        start: Start position (x, y)
        heading: Start heading (rad)
        segments: ``("straight", length)`` or ``("arc", radius, angle)``; a positive arc
            angle turns left
        d_lb, d_rb: Constant boundary distance or a function of arclength
        ds: Sample spacing (m)
        lane_markers: Lane marker offsets carried by the path
        name: Label of the path

    Returns:
        ReferencePath: The sampled path
    """
    x0, y0, psi0 = float(start[0]), float(start[1]), float(heading)
    thetas, xs, ys, psis = [0.0], [x0], [y0], [psi0]
    s_total = 0.0
    for seg in segments:
        kind = seg[0]
        if kind == "straight":
            length, kappa = float(seg[1]), 0.0
        elif kind == "arc":
            radius, angle = float(seg[1]), float(seg[2])
            length, kappa = radius * abs(angle), math.copysign(1.0 / radius, angle)
        else:
            raise ContractError(f"unknown path segment kind {kind!r}")
        n = max(1, int(math.ceil(length / ds - 1e-9)))
        s = np.linspace(0.0, length, n + 1)[1:]
        if kappa == 0.0:
            px = x0 + s * math.cos(psi0)
            py = y0 + s * math.sin(psi0)
            ph = np.full_like(s, psi0)
        else:
            ph = psi0 + kappa * s
            px = x0 + (np.sin(ph) - math.sin(psi0)) / kappa
            py = y0 - (np.cos(ph) - math.cos(psi0)) / kappa
        thetas.extend(s_total + s)
        xs.extend(px)
        ys.extend(py)
        psis.extend(ph)
        x0, y0, psi0 = float(px[-1]), float(py[-1]), float(ph[-1])
        s_total += length
    theta = np.array(thetas)
    return ReferencePath(
        theta,
        xs,
        ys,
        wrap_angle(np.array(psis)),
        _boundary(d_lb, theta),
        _boundary(d_rb, theta),
        lane_markers=lane_markers,
        ds_max=max(DEFAULT_DS_MAX, ds),
        name=name,
    )


def straight_path(
    length: float,
    start: Tuple[float, float] = (0.0, 0.0),
    heading: float = 0.0,
    half_width: float = 2.0,
    ds: float = 0.25,
    lane_markers: Iterable[float] = (),
    name: str = "straight",
) -> ReferencePath:
    return build_path(start, heading, [("straight", length)], half_width, half_width, ds, lane_markers, name)


def arc_path(
    radius: float,
    angle: float,
    start: Tuple[float, float] = (0.0, 0.0),
    heading: float = 0.0,
    half_width: float = 2.0,
    ds: float = 0.25,
    name: str = "arc",
) -> ReferencePath:
    return build_path(start, heading, [("arc", radius, angle)], half_width, half_width, ds, (), name)
