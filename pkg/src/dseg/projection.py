"""LiDAR-to-camera transfer of segment labels and nearest-neighbour densification."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli_w
from scipy.spatial import cKDTree

from . import GROUND, IGNORE
from ._toml import load_toml
from .netpbm import read_pgm, write_pgm16
from .rangeseg import LidarSpec, PointCloud, RangeSegmentation

Z_MIN = 0.1


@dataclass
class CameraCalibration:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    T_lidar_to_cam: np.ndarray
    frame_id: str | None = None

    def __post_init__(self):
        self.T_lidar_to_cam = np.asarray(self.T_lidar_to_cam, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image extent must be positive")
        rot = self.rotation
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("extrinsic rotation is not orthonormal")
        if np.linalg.det(rot) < 0:
            raise ValueError("extrinsic rotation is a reflection")
        if not np.allclose(self.T_lidar_to_cam[3], [0, 0, 0, 1]):
            raise ValueError("extrinsic bottom row must be [0, 0, 0, 1]")

    @property
    def rotation(self) -> np.ndarray:
        return self.T_lidar_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.T_lidar_to_cam[:3, 3]

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass
class SparseLabelImage:
    u: np.ndarray
    v: np.ndarray
    label: np.ndarray
    depth: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.int64).reshape(-1)
        self.v = np.asarray(self.v, dtype=np.int64).reshape(-1)
        self.label = np.asarray(self.label, dtype=np.int64).reshape(-1)
        self.depth = np.asarray(self.depth, dtype=np.float64).reshape(-1)
        if not (len(self.u) == len(self.v) == len(self.label) == len(self.depth)):
            raise ValueError("sparse entry columns differ in length")
        if len(self.u) and ((self.u < 0).any() or (self.u >= self.width).any()
                            or (self.v < 0).any() or (self.v >= self.height).any()):
            raise ValueError("sparse entry outside the image")

    def __len__(self) -> int:
        return len(self.u)


@dataclass
class ImageSegmentMap:
    labels: np.ndarray

    def segment_ids(self) -> list[int]:
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i != IGNORE and i != GROUND]


@dataclass(frozen=True)
class ProjectionParams:
    project_invalid: bool = True
    invalid_range: float = 1000.0
    z_min: float = Z_MIN


@dataclass(frozen=True)
class DensifyParams:
    max_radius: float = 8.0
    ignore_competes: bool = True


def transform_point(p, calib: CameraCalibration) -> np.ndarray:
    """Map LiDAR-frame point(s) of shape (3,) or (N, 3) into the camera frame."""
    p = np.asarray(p, dtype=np.float64)
    return p @ calib.rotation.T + calib.translation


def project_point(p_cam, calib: CameraCalibration, z_min: float = Z_MIN):
    """Continuous pixel coordinates and depth of a camera-frame point, or None if out of view."""
    x, y, z = (float(t) for t in p_cam)
    if not z > z_min:
        return None
    u = calib.fx * x / z + calib.cx
    v = calib.fy * y / z + calib.cy
    if not (0 <= u < calib.width and 0 <= v < calib.height):
        return None
    return u, v, z


def project_many(p_cam: np.ndarray, calib: CameraCalibration, z_min: float = Z_MIN):
    """Vectorized project_point: returns (u, v, z, in_view) arrays."""
    p_cam = np.asarray(p_cam, dtype=np.float64).reshape(-1, 3)
    z = p_cam[:, 2]
    front = z > z_min
    safe = np.where(front, z, 1.0)
    u = calib.fx * p_cam[:, 0] / safe + calib.cx
    v = calib.fy * p_cam[:, 1] / safe + calib.cy
    ok = front & (u >= 0) & (u < calib.width) & (v >= 0) & (v < calib.height)
    return u, v, z, ok


def unproject(u: float, v: float, depth: float, calib: CameraCalibration) -> np.ndarray:
    return np.array([(u - calib.cx) / calib.fx * depth, (v - calib.cy) / calib.fy * depth, depth])


def rasterize(u: np.ndarray, v: np.ndarray, calib: CameraCalibration) -> tuple[np.ndarray, np.ndarray]:
    """Round-half-up to the nearest pixel, kept inside the image."""
    col = np.minimum(np.floor(np.asarray(u) + 0.5).astype(np.int64), calib.width - 1)
    row = np.minimum(np.floor(np.asarray(v) + 0.5).astype(np.int64), calib.height - 1)
    return col, row


def zbuffer(u, v, label, depth, width: int, height: int) -> SparseLabelImage:
    """Keep one entry per pixel: smallest depth, then smallest label."""
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    label = np.asarray(label, dtype=np.int64)
    depth = np.asarray(depth, dtype=np.float64)
    if len(u) == 0:
        return SparseLabelImage(u, v, label, depth, width, height)
    pix = v * width + u
    order = np.lexsort((label, depth, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    keep = order[first]
    return SparseLabelImage(u[keep], v[keep], label[keep], depth[keep], width, height)


def project_segments(seg: RangeSegmentation, pc: PointCloud, calib: CameraCalibration,
                     params: ProjectionParams = ProjectionParams(),
                     lidar: LidarSpec | None = None) -> SparseLabelImage:
    """Deposit each in-view LiDAR point's segment label at its pixel.

    Cells without a valid return contribute IGNORE markers along their nominal
    ray when ``params.project_invalid`` is set; that needs the sensor geometry.
    """
    if pc.frame_id is not None and calib.frame_id is not None and pc.frame_id != calib.frame_id:
        raise ValueError(f"frame mismatch: cloud {pc.frame_id!r} vs calibration {calib.frame_id!r}")
    b, a = seg.labels.shape
    if len(pc) and (pc.beam_row.max() >= b or pc.azimuth_col.max() >= a):
        raise ValueError("point cloud does not match the segmentation grid")
    us, vs, labels, depths = [], [], [], []

    valid = pc.valid.copy()
    if len(pc):
        valid &= np.linalg.norm(pc.xyz, axis=1) > 0
    if valid.any():
        pts = pc.xyz[valid]
        lab = seg.labels[pc.beam_row[valid], pc.azimuth_col[valid]]
        u, v, z, ok = project_many(transform_point(pts, calib), calib, params.z_min)
        col, row = rasterize(u[ok], v[ok], calib)
        us.append(col), vs.append(row), labels.append(lab[ok]), depths.append(z[ok])

    if params.project_invalid:
        if lidar is None:
            raise ValueError("projecting invalid cells needs the LiDAR spec")
        if (lidar.beams, lidar.azimuth_steps) != (b, a):
            raise ValueError("LiDAR spec does not match the segmentation grid")
        filled = np.zeros((b, a), dtype=bool)
        if valid.any():
            filled[pc.beam_row[valid], pc.azimuth_col[valid]] = True
        rays = lidar.ray_directions()[~filled] * params.invalid_range
        if len(rays):
            u, v, z, ok = project_many(transform_point(rays, calib), calib, params.z_min)
            col, row = rasterize(u[ok], v[ok], calib)
            us.append(col), vs.append(row)
            labels.append(np.full(len(col), IGNORE, dtype=np.int64)), depths.append(z[ok])

    if not us:
        return SparseLabelImage([], [], [], [], calib.width, calib.height)
    return zbuffer(np.concatenate(us), np.concatenate(vs), np.concatenate(labels),
                   np.concatenate(depths), calib.width, calib.height)


def densify(sparse: SparseLabelImage, params: DensifyParams = DensifyParams()) -> ImageSegmentMap:
    """Nearest-entry label propagation, IGNORE beyond ``max_radius`` pixels.

    Equidistant entries are ranked by smaller depth, then smaller label.
    """
    w, h = sparse.width, sparse.height
    out = np.full((h, w), IGNORE, dtype=np.int64)
    keep = np.ones(len(sparse), dtype=bool)
    if not params.ignore_competes:
        keep = sparse.label != IGNORE
    eu, ev = sparse.u[keep], sparse.v[keep]
    elab, edep = sparse.label[keep], sparse.depth[keep]
    if len(eu) == 0:
        return ImageSegmentMap(out)

    # rank entries once so that the tie rule reduces to "smallest rank"
    rank = np.empty(len(eu), dtype=np.int64)
    rank[np.lexsort((elab, edep))] = np.arange(len(eu))

    coords = np.stack([eu, ev], axis=1)
    tree = cKDTree(coords)
    yy, xx = np.mgrid[0:h, 0:w]
    pix = np.stack([xx.ravel(), yy.ravel()], axis=1)
    r = params.max_radius
    bound = math.inf if math.isinf(r) else r + 1e-6
    kq = min(8, len(eu))
    dist, idx = tree.query(pix, k=kq, distance_upper_bound=bound)
    dist = dist.reshape(len(pix), kq)
    idx = idx.reshape(len(pix), kq)
    found = np.isfinite(dist[:, 0])

    best = np.full(len(pix), -1, dtype=np.int64)
    sel = np.flatnonzero(found)
    if sel.size:
        cand = idx[sel]
        hit = np.isfinite(dist[sel])
        safe = np.where(hit, cand, 0)
        d2 = np.where(hit, (coords[safe, 0] - pix[sel, 0:1]) ** 2 + (coords[safe, 1] - pix[sel, 1:2]) ** 2,
                      np.iinfo(np.int64).max)
        dmin = d2.min(axis=1)
        tied = d2 == dmin[:, None]
        rk = np.where(tied, rank[safe], np.iinfo(np.int64).max)
        best[sel] = safe[np.arange(len(sel)), rk.argmin(axis=1)]
        # every returned candidate tied: an equally near entry may be missing
        overflow = sel[tied.all(axis=1) & (kq < len(eu))]
        for p in overflow:
            dd = math.sqrt(dmin[np.searchsorted(sel, p)])
            near = tree.query_ball_point(pix[p], dd + 1e-6)
            near = [q for q in near
                    if (coords[q, 0] - pix[p, 0]) ** 2 + (coords[q, 1] - pix[p, 1]) ** 2
                    == dmin[np.searchsorted(sel, p)]]
            best[p] = min(near, key=lambda q: rank[q])
        if not math.isinf(r):
            dmin_all = np.full(len(pix), np.iinfo(np.int64).max)
            dmin_all[sel] = dmin
            best[dmin_all > r * r] = -1
    flat = out.reshape(-1)
    ok = best >= 0
    flat[ok] = elab[best[ok]]
    return ImageSegmentMap(out)


# -- persistence -------------------------------------------------------------

def write_calibration(path: str | Path, calib: CameraCalibration) -> None:
    doc = {}
    if calib.frame_id is not None:
        doc["frame_id"] = calib.frame_id
    doc["intrinsics"] = {"fx": float(calib.fx), "fy": float(calib.fy), "cx": float(calib.cx),
                         "cy": float(calib.cy), "width": int(calib.width), "height": int(calib.height)}
    doc["extrinsics"] = {"matrix": [float(x) for x in calib.T_lidar_to_cam.ravel()]}
    Path(path).write_text(tomli_w.dumps(doc))


def read_calibration(path: str | Path) -> CameraCalibration:
    doc = load_toml(path)
    try:
        intr = doc["intrinsics"]
        matrix = doc["extrinsics"]["matrix"]
    except KeyError as exc:
        raise ValueError(f"{path}: missing calibration section {exc}") from exc
    if len(matrix) != 16:
        raise ValueError(f"{path}: extrinsic matrix needs 16 values, got {len(matrix)}")
    return CameraCalibration(float(intr["fx"]), float(intr["fy"]), float(intr["cx"]),
                             float(intr["cy"]), int(intr["width"]), int(intr["height"]),
                             np.array(matrix, dtype=np.float64).reshape(4, 4),
                             frame_id=doc.get("frame_id"))


def write_segment_map(path: str | Path, segmap: ImageSegmentMap) -> None:
    write_pgm16(path, segmap.labels)


def read_segment_map(path: str | Path) -> ImageSegmentMap:
    return ImageSegmentMap(read_pgm(path))
