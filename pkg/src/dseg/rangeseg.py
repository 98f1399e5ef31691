"""Range-image construction and geometric ground/object segmentation.

Ground cells are grown by breadth-first search from the lowest valid cell of
each column; the remaining cells are grouped into object segments by a second
BFS that joins 4-neighbours whose angle criterion exceeds a threshold.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import GROUND, IGNORE
from .netpbm import read_pgm, write_pgm16

CLOUD_HEADER = ["x", "y", "z", "beam_row", "azimuth_col", "valid"]


@dataclass(frozen=True)
class LidarSpec:
    elevation_angles: np.ndarray
    azimuth_steps: int
    azimuth_origin: float = -math.pi
    azimuth_span: float = 2 * math.pi

    def __post_init__(self):
        elev = np.asarray(self.elevation_angles, dtype=np.float64)
        object.__setattr__(self, "elevation_angles", elev)
        if elev.ndim != 1 or elev.size < 2:
            raise ValueError("need at least 2 beams")
        if self.azimuth_steps < 2:
            raise ValueError("need at least 2 azimuth steps")
        d = np.diff(elev)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("elevation angles must be strictly monotone")
        if self.azimuth_span <= 0:
            raise ValueError("azimuth span must be positive")

    @property
    def beams(self) -> int:
        return int(self.elevation_angles.size)

    @property
    def azimuth_step(self) -> float:
        return self.azimuth_span / self.azimuth_steps

    @property
    def wraps(self) -> bool:
        """True when the columns close a full circle."""
        return math.isclose(self.azimuth_span, 2 * math.pi, rel_tol=1e-9)

    @property
    def bottom_row_last(self) -> bool:
        """True when the lowest beam sits in the last row."""
        return bool(self.elevation_angles[-1] < self.elevation_angles[0])

    def azimuths(self) -> np.ndarray:
        return self.azimuth_origin + (np.arange(self.azimuth_steps) + 0.5) * self.azimuth_step

    def ray_directions(self) -> np.ndarray:
        """Unit ray direction per cell, shape (B, A, 3)."""
        el = self.elevation_angles[:, None]
        az = self.azimuths()[None, :]
        return np.stack(
            np.broadcast_arrays(np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)),
            axis=-1,
        )

    @classmethod
    def uniform(cls, beams: int, azimuth_steps: int, min_elevation: float, max_elevation: float,
                **kwargs) -> "LidarSpec":
        """Beams evenly spaced, row 0 at the top (highest elevation)."""
        return cls(np.linspace(max_elevation, min_elevation, beams), azimuth_steps, **kwargs)


@dataclass
class PointCloud:
    xyz: np.ndarray
    beam_row: np.ndarray
    azimuth_col: np.ndarray
    valid: np.ndarray
    sensor_id: str = "lidar"
    frame_id: str | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.beam_row = np.asarray(self.beam_row, dtype=np.int64).reshape(-1)
        self.azimuth_col = np.asarray(self.azimuth_col, dtype=np.int64).reshape(-1)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        n = len(self.xyz)
        if not (len(self.beam_row) == len(self.azimuth_col) == len(self.valid) == n):
            raise ValueError("point cloud columns differ in length")

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def empty(cls, **kwargs) -> "PointCloud":
        return cls(np.zeros((0, 3)), [], [], [], **kwargs)


@dataclass
class RangeImage:
    ranges: np.ndarray
    validity: np.ndarray
    point_index: np.ndarray
    points: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.ranges.shape

    def cell_points(self, spec: LidarSpec) -> np.ndarray:
        """3D point per cell (zeros where invalid); rebuilt from the ray grid when not stored."""
        if self.points is not None:
            pts = self.points
        else:
            pts = self.ranges[..., None] * spec.ray_directions()
        return np.where(self.validity[..., None], pts, 0.0)


@dataclass
class RangeSegmentation:
    labels: np.ndarray
    segment_count: int

    def segment_ids(self) -> list[int]:
        return list(range(1, self.segment_count + 1))


@dataclass(frozen=True)
class GroundParams:
    ground_angle_threshold: float = math.radians(5.0)
    max_height_step: float = 0.3


@dataclass(frozen=True)
class SegParams:
    theta: float = math.radians(10.0)
    min_segment_size: int = 20


def build_range_image(pc: PointCloud, spec: LidarSpec) -> RangeImage:
    b, a = spec.beams, spec.azimuth_steps
    ranges = np.zeros((b, a))
    validity = np.zeros((b, a), dtype=bool)
    point_index = np.full((b, a), -1, dtype=np.int64)
    if len(pc) == 0:
        return RangeImage(ranges, validity, point_index, np.zeros((b, a, 3)))
    rows, cols = pc.beam_row, pc.azimuth_col
    bad = (rows < 0) | (rows >= b) | (cols < 0) | (cols >= a)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise IndexError(f"point {i} at cell ({rows[i]}, {cols[i]}) outside {b}x{a} grid")
    flat = rows * a + cols
    uniq, counts = np.unique(flat, return_counts=True)
    if (counts > 1).any():
        cell = int(uniq[counts > 1][0])
        raise ValueError(f"several points map to cell ({cell // a}, {cell % a})")
    point_index[rows, cols] = np.arange(len(pc))
    v = pc.valid
    validity[rows[v], cols[v]] = True
    ranges[rows[v], cols[v]] = np.linalg.norm(pc.xyz[v], axis=1)
    # a valid point sitting at the origin has no usable range
    zero = validity & (ranges <= 0)
    validity[zero] = False
    ranges[zero] = 0.0
    points = np.zeros((b, a, 3))
    points[validity] = pc.xyz[point_index[validity]]
    return RangeImage(ranges, validity, point_index, points)


def neighbor_angle(d1: float, d2: float, alpha: float) -> float:
    """Angle at the farther return between the two beams of a neighbouring pair.

    Values near pi/2 mean both returns lie on one surface; small values mean a
    depth jump.  Argument order of the two ranges does not matter.
    """
    if d1 <= 0 or d2 <= 0:
        raise ValueError(f"ranges must be positive, got {d1}, {d2}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    far, near = max(d1, d2), min(d1, d2)
    return math.atan2(near * math.sin(alpha), far - near * math.cos(alpha))


def _beta(r1: np.ndarray, r2: np.ndarray, alpha) -> np.ndarray:
    far = np.maximum(r1, r2)
    near = np.minimum(r1, r2)
    return np.arctan2(near * np.sin(alpha), far - near * np.cos(alpha))


def _neighbors(r: int, c: int, b: int, a: int, wrap: bool):
    if r > 0:
        yield r - 1, c
    if r + 1 < b:
        yield r + 1, c
    if c > 0:
        yield r, c - 1
    elif wrap:
        yield r, a - 1
    if c + 1 < a:
        yield r, c + 1
    elif wrap:
        yield r, 0


def _inclination(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = q - p
    return np.arctan2(np.abs(d[..., 2]), np.hypot(d[..., 0], d[..., 1]))


def column_slopes(ri: RangeImage, spec: LidarSpec) -> np.ndarray:
    """Inclination of each valid cell towards the next valid beam above it.

    The topmost valid cell of a run falls back to the pair below; isolated
    cells get +inf.
    """
    pts = ri.cell_points(spec)
    v = ri.validity
    if not spec.bottom_row_last:
        pts, v = pts[::-1], v[::-1]
    # row 0 is now the top beam; the cell above row r is row r - 1
    pair = _inclination(pts[1:], pts[:-1])
    pair_ok = v[1:] & v[:-1]
    slope = np.full(v.shape, np.inf)
    up = np.where(pair_ok, pair, np.inf)
    slope[1:] = up
    down_ok = np.zeros(v.shape, dtype=bool)
    down_ok[:-1] = pair_ok
    fallback = v & ~np.isfinite(slope) & down_ok
    slope[:-1][fallback[:-1]] = pair[fallback[:-1]]
    slope[~v] = np.inf
    if not spec.bottom_row_last:
        slope = slope[::-1]
    return slope


def ground_edges(ri: RangeImage, spec: LidarSpec, params: GroundParams) -> tuple[np.ndarray, np.ndarray]:
    """Passable ground steps: vertical (B-1, A) between rows r/r+1, horizontal (B, A) between c/c+1."""
    pts = ri.cell_points(spec)
    v = ri.validity
    thr = params.ground_angle_threshold

    def passable(p, q, ok):
        dz = np.abs(q[..., 2] - p[..., 2])
        return ok & (_inclination(p, q) <= thr) & (dz <= params.max_height_step)

    vert = passable(pts[:-1], pts[1:], v[:-1] & v[1:])
    nxt = np.roll(pts, -1, axis=1)
    horiz = passable(pts, nxt, v & np.roll(v, -1, axis=1))
    if not spec.wraps:
        horiz[:, -1] = False
    return vert, horiz


def segment_ground(ri: RangeImage, spec: LidarSpec,
                   params: GroundParams = GroundParams()) -> np.ndarray:
    """Flag ground cells.

    A cell may become ground only if its own column slope (towards the beam
    above) is within the threshold.  Seeds are the lowest valid cell of each
    column; growth crosses 4-neighbour steps that are themselves flat.
    """
    b, a = ri.shape
    ground = np.zeros((b, a), dtype=bool)
    if not ri.validity.any():
        return ground
    vert, horiz = ground_edges(ri, spec, params)
    flat = column_slopes(ri, spec) <= params.ground_angle_threshold
    rows = range(b - 1, -1, -1) if spec.bottom_row_last else range(b)
    queue: deque[tuple[int, int]] = deque()
    for c in range(a):
        for r in rows:
            if ri.validity[r, c]:
                if flat[r, c]:
                    ground[r, c] = True
                    queue.append((r, c))
                break

    def step_ok(r, c, nr, nc):
        if nr != r:
            return vert[min(r, nr), c]
        if nc == (c + 1) % a:
            return horiz[r, c]
        return horiz[r, nc]

    while queue:
        r, c = queue.popleft()
        for nr, nc in _neighbors(r, c, b, a, spec.wraps):
            if not ground[nr, nc] and flat[nr, nc] and step_ok(r, c, nr, nc):
                ground[nr, nc] = True
                queue.append((nr, nc))

    # foot cells: flat step up from ground but steep above (an object starts
    # right behind them).  Claimed without further growth.
    if spec.bottom_row_last:
        below_ground = ground[1:] & vert
        foot = np.zeros_like(ground)
        foot[:-1] = below_ground
    else:
        foot = np.zeros_like(ground)
        foot[1:] = ground[:-1] & vert
    return ground | (foot & ri.validity)


def object_edges(ri: RangeImage, ground: np.ndarray, spec: LidarSpec,
                 theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Same-object links: vertical (B-1, A) and horizontal (B, A, link c -> c+1)."""
    cand = ri.validity & ~ground
    rng = np.where(cand, ri.ranges, 1.0)
    alpha_v = np.abs(np.diff(spec.elevation_angles))[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        vert = cand[:-1] & cand[1:] & (_beta(rng[:-1], rng[1:], alpha_v) > theta)
        nxt = np.roll(rng, -1, axis=1)
        horiz = cand & np.roll(cand, -1, axis=1) & (_beta(rng, nxt, spec.azimuth_step) > theta)
    if not spec.wraps:
        horiz[:, -1] = False
    return vert, horiz


def segment_objects(ri: RangeImage, ground: np.ndarray, spec: LidarSpec,
                    params: SegParams = SegParams()) -> RangeSegmentation:
    b, a = ri.shape
    cand = ri.validity & ~ground
    vert, horiz = object_edges(ri, ground, spec, params.theta)
    comp = np.zeros((b, a), dtype=np.int64)
    members: list[list[tuple[int, int]]] = []
    for r0 in range(b):
        for c0 in range(a):
            if not cand[r0, c0] or comp[r0, c0]:
                continue
            members.append([(r0, c0)])
            cid = len(members)
            comp[r0, c0] = cid
            queue = deque([(r0, c0)])
            while queue:
                r, c = queue.popleft()
                links = []
                if r > 0 and vert[r - 1, c]:
                    links.append((r - 1, c))
                if r + 1 < b and vert[r, c]:
                    links.append((r + 1, c))
                if horiz[r, c - 1] and (c > 0 or spec.wraps):
                    links.append((r, (c - 1) % a))
                if horiz[r, c]:
                    links.append((r, (c + 1) % a))
                for nr, nc in links:
                    if not comp[nr, nc]:
                        comp[nr, nc] = cid
                        members[cid - 1].append((nr, nc))
                        queue.append((nr, nc))

    labels = np.full((b, a), IGNORE, dtype=np.int64)
    labels[ground & ri.validity] = GROUND
    count = 0
    for cells in members:
        if len(cells) < params.min_segment_size:
            continue
        count += 1
        rr, cc = zip(*cells)
        labels[list(rr), list(cc)] = count
    return RangeSegmentation(labels, count)


def segment_cloud(pc: PointCloud, spec: LidarSpec, ground_params: GroundParams = GroundParams(),
                  seg_params: SegParams = SegParams()) -> tuple[RangeImage, RangeSegmentation]:
    ri = build_range_image(pc, spec)
    ground = segment_ground(ri, spec, ground_params)
    return ri, segment_objects(ri, ground, spec, seg_params)


# -- persistence -------------------------------------------------------------

def write_cloud_csv(path: str | Path, pc: PointCloud) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CLOUD_HEADER)
        for (x, y, z), r, c, ok in zip(pc.xyz.tolist(), pc.beam_row.tolist(),
                                       pc.azimuth_col.tolist(), pc.valid.tolist()):
            if not ok:
                x = y = z = 0.0
            w.writerow([repr(x), repr(y), repr(z), r, c, int(ok)])


def read_cloud_csv(path: str | Path, sensor_id: str = "lidar", frame_id: str | None = None) -> PointCloud:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CLOUD_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CLOUD_HEADER)}, got {header}")
        rows = [row for row in reader if row]
    if not rows:
        return PointCloud.empty(sensor_id=sensor_id, frame_id=frame_id)
    try:
        xyz = [[float(r[0]), float(r[1]), float(r[2])] for r in rows]
        beam = [int(r[3]) for r in rows]
        col = [int(r[4]) for r in rows]
        valid = [int(r[5]) for r in rows]
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed row") from exc
    if any(v not in (0, 1) for v in valid):
        raise ValueError(f"{path}: valid flag must be 0 or 1")
    return PointCloud(xyz, beam, col, valid, sensor_id=sensor_id, frame_id=frame_id)


def write_segmentation_pgm(path: str | Path, seg: RangeSegmentation) -> None:
    if seg.segment_count >= GROUND:
        raise ValueError("too many segments for 16-bit encoding")
    write_pgm16(path, seg.labels)


def read_segmentation_pgm(path: str | Path) -> RangeSegmentation:
    labels = read_pgm(path)
    ids = labels[(labels != IGNORE) & (labels != GROUND)]
    return RangeSegmentation(labels, int(ids.max()) if ids.size else 0)


def write_range_pgm(path: str | Path, ri: RangeImage) -> None:
    """Ranges quantized to centimetres, 0 marking invalid cells."""
    cm = np.where(ri.validity, np.clip(np.round(ri.ranges * 100.0), 1, 65535), 0)
    write_pgm16(path, cm.astype(np.int64))
