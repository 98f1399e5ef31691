"""Segment crops, handcrafted segment descriptors, k-means and pseudo-label maps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import GROUND, IGNORE
from .netpbm import read_pgm, write_pgm16
from .projection import ImageSegmentMap

HIST_BINS = 8
OCC_GRID = 8
CANONICAL = 64
FEATURE_DIM = 3 * HIST_BINS + OCC_GRID * OCC_GRID + 4


@dataclass
class SegmentCrop:
    pixels: np.ndarray  # h x w x 3 uint8, zero outside the mask
    mask: np.ndarray
    source: tuple[str, int]
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1 (exclusive)
    image_shape: tuple[int, int]


@dataclass
class SegmentFeature:
    vector: np.ndarray
    source: tuple[str, int]


@dataclass
class ClusterModel:
    centroids: np.ndarray
    k: int
    inertia: float
    seed: int
    history: list[float] = field(default_factory=list)
    labels: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])


@dataclass
class PseudoLabelMap:
    labels: np.ndarray


@dataclass(frozen=True)
class FeatureParams:
    color_weight: float = 2.0
    occupancy_weight: float = 0.125
    shape_weight: float = 0.5


@dataclass(frozen=True)
class KMeansParams:
    max_iter: int = 300
    tol: float = 1e-6


def crop_segment(image: np.ndarray, segmap: ImageSegmentMap, segment_id: int,
                 frame_id: str = "") -> SegmentCrop:
    member = segmap.labels == segment_id
    if segment_id == IGNORE or not member.any():
        raise KeyError(f"segment {segment_id} not present in the segment map")
    rows = np.flatnonzero(member.any(axis=1))
    cols = np.flatnonzero(member.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    mask = member[r0:r1, c0:c1].copy()
    pixels = np.where(mask[..., None], image[r0:r1, c0:c1], 0).astype(np.uint8)
    return SegmentCrop(pixels, mask, (frame_id, int(segment_id)), (int(r0), int(c0), int(r1), int(c1)),
                       segmap.labels.shape)


def color_histograms(crop: SegmentCrop) -> np.ndarray:
    """Per-channel 8-bin histograms of the masked pixels, each summing to 1."""
    vals = crop.pixels[crop.mask].astype(np.int64)
    bins = vals * HIST_BINS // 256
    hist = np.zeros((3, HIST_BINS))
    for ch in range(3):
        hist[ch] = np.bincount(bins[:, ch], minlength=HIST_BINS)
    return (hist / len(vals)).ravel()


def _resize_mask(mask: np.ndarray, size: int = CANONICAL) -> np.ndarray:
    h, w = mask.shape
    ri = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(np.int64)
    ci = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(np.int64)
    return mask[np.ix_(ri, ci)]


def occupancy_grid(crop: SegmentCrop) -> np.ndarray:
    canon = _resize_mask(crop.mask).astype(np.float64)
    cell = CANONICAL // OCC_GRID
    frac = canon.reshape(OCC_GRID, cell, OCC_GRID, cell).mean(axis=(1, 3))
    return (frac >= 0.5).astype(np.float64).ravel()


def shape_scalars(crop: SegmentCrop) -> np.ndarray:
    r0, c0, r1, c1 = crop.bbox
    bh, bw = r1 - r0, c1 - c0
    area = float(crop.mask.sum())
    img_h, img_w = crop.image_shape
    return np.array([
        math.log(bw / bh),
        area / (bh * bw),
        math.sqrt(area) / math.hypot(img_h, img_w),
        (r0 + r1) / 2 / img_h,
    ])


def raw_descriptor(crop: SegmentCrop) -> np.ndarray:
    """Unweighted, unnormalized concatenation: histograms, occupancy, shape scalars."""
    if not crop.mask.any():
        raise ValueError("empty segment mask")
    return np.concatenate([color_histograms(crop), occupancy_grid(crop), shape_scalars(crop)])


def extract_features(crop: SegmentCrop, params: FeatureParams = FeatureParams()) -> SegmentFeature:
    raw = raw_descriptor(crop)
    n_hist = 3 * HIST_BINS
    n_occ = OCC_GRID * OCC_GRID
    weights = np.concatenate([
        np.full(n_hist, params.color_weight),
        np.full(n_occ, params.occupancy_weight),
        np.full(4, params.shape_weight),
    ])
    vec = raw * weights
    norm = np.linalg.norm(vec)
    if not norm > 0:
        raise ValueError(f"degenerate descriptor for segment {crop.source}")
    return SegmentFeature(vec / norm, crop.source)


def segment_features(image: np.ndarray, segmap: ImageSegmentMap, frame_id: str,
                     min_pixels: int = 9, cluster_ground: bool = True,
                     params: FeatureParams = FeatureParams()) -> tuple[list[SegmentFeature], list[int]]:
    """Descriptors for every usable segment of a frame, plus the ids dropped as too small."""
    ids, counts = np.unique(segmap.labels, return_counts=True)
    feats, dropped = [], []
    for sid, n in zip(ids.tolist(), counts.tolist()):
        if sid == IGNORE or (sid == GROUND and not cluster_ground):
            continue
        if n < min_pixels:
            dropped.append(sid)
            continue
        feats.append(extract_features(crop_segment(image, segmap, sid, frame_id), params))
    return feats, dropped


# -- k-means -----------------------------------------------------------------

def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # explicit differences rather than a BLAS product: bitwise stable across thread counts
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [int(rng.integers(n))]
    closest = _sq_dists(x, x[centers])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = int(np.searchsorted(np.cumsum(closest), rng.uniform(0, total), side="right"))
            pick = min(pick, n - 1)
        else:
            pick = int(rng.integers(n))
        centers.append(pick)
        closest = np.minimum(closest, _sq_dists(x, x[[pick]])[:, 0])
    return x[centers].copy()


def kmeans_fit(features, k: int, seed: int, params: KMeansParams = KMeansParams()) -> ClusterModel:
    """k-means++ seeding followed by Lloyd iterations.

    ``history`` holds the inertia measured after every assignment step; it never
    increases.  Empty clusters are re-seeded at the point farthest from its centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be an N x D array")
    n = len(x)
    if k < 1:
        raise ValueError("k must be at least 1")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if not np.isfinite(x).all():
        raise ValueError("features contain non-finite values")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    history: list[float] = []
    labels = None
    for _ in range(max(params.max_iter, 1)):
        d2 = _sq_dists(x, centroids)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        updated = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        own = d2[np.arange(n), labels]
        taken: set[int] = set()
        for j in range(k):
            if counts[j]:
                updated[j] = x[labels == j].mean(axis=0)
                continue
            # farthest point from its own centroid, not already used for a re-seed
            for i in np.argsort(-own, kind="stable"):
                if int(i) not in taken:
                    taken.add(int(i))
                    updated[j] = x[i]
                    own[i] = 0.0
                    break
        shift = float(np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max())
        centroids = updated
        if shift < params.tol and counts.all():
            break
    d2 = _sq_dists(x, centroids)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), labels].sum())
    if inertia <= history[-1]:
        history.append(inertia)
    return ClusterModel(centroids, k, inertia, seed, history, labels)


def kmeans_assign(model: ClusterModel, f) -> int:
    """Nearest centroid as a 1-based cluster id; ties go to the smaller id."""
    vec = f.vector if isinstance(f, SegmentFeature) else np.asarray(f, dtype=np.float64)
    if vec.shape != (model.dim,):
        raise ValueError(f"feature dimension {vec.shape} does not match model dimension {model.dim}")
    return int(_sq_dists(vec[None, :], model.centroids)[0].argmin()) + 1


def assemble_pseudo_labels(segmap: ImageSegmentMap, assignment: Mapping[int, int],
                           cluster_ground: bool = True) -> PseudoLabelMap:
    """Paint every segment's pixels with its cluster id; everything else is IGNORE.

    ``assignment`` may map a segment to IGNORE (segments dropped from clustering).
    """
    out = np.full(segmap.labels.shape, IGNORE, dtype=np.int64)
    for sid in np.unique(segmap.labels).tolist():
        if sid == IGNORE or (sid == GROUND and not cluster_ground):
            continue
        if sid not in assignment:
            raise KeyError(f"segment {sid} has no cluster assignment")
        out[segmap.labels == sid] = assignment[sid]
    return PseudoLabelMap(out)


# -- persistence -------------------------------------------------------------

def save_features(path: str | Path, feats: Iterable[SegmentFeature]) -> None:
    feats = list(feats)
    dim = len(feats[0].vector) if feats else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "segment_id"] + [f"f_{i}" for i in range(dim)])
        for f in feats:
            if len(f.vector) != dim:
                raise ValueError("features of mixed dimension")
            w.writerow([f.source[0], f.source[1]] + [repr(float(v)) for v in f.vector])


def load_external_features(path: str | Path,
                           known: Iterable[tuple[str, int]] | None = None) -> list[SegmentFeature]:
    """Read a ``frame_id,segment_id,f_0..f_{D-1}`` CSV.

    When ``known`` is given, rows referring to any other (frame, segment) pair are rejected.
    """
    known_set = set(known) if known is not None else None
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        return []
    header = rows[0]
    if header[:2] != ["frame_id", "segment_id"]:
        raise ValueError(f"{path}: header must start with frame_id,segment_id")
    dim = len(header) - 2
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != dim + 2:
            raise ValueError(f"{path}:{n}: expected {dim} feature values, got {len(row) - 2}")
        key = (row[0], int(row[1]))
        if known_set is not None and key not in known_set:
            raise KeyError(f"{path}:{n}: unknown segment reference {key}")
        vec = np.array([float(v) for v in row[2:]])
        if not np.isfinite(vec).all():
            raise ValueError(f"{path}:{n}: non-finite feature value")
        out.append(SegmentFeature(vec, key))
    return out


def save_cluster_model(path: str | Path, model: ClusterModel) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "D", "seed", "inertia"])
        w.writerow([model.k, model.dim, model.seed, repr(float(model.inertia))])
        for row in model.centroids:
            w.writerow([repr(float(v)) for v in row])


def load_cluster_model(path: str | Path) -> ClusterModel:
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if len(rows) < 2 or rows[0] != ["k", "D", "seed", "inertia"]:
        raise ValueError(f"{path}: not a cluster model file")
    k, dim, seed = int(rows[1][0]), int(rows[1][1]), int(rows[1][2])
    centroids = np.array([[float(v) for v in r] for r in rows[2:]], dtype=np.float64)
    if centroids.shape != (k, dim):
        raise ValueError(f"{path}: expected {k}x{dim} centroids, got {centroids.shape}")
    return ClusterModel(centroids, k, float(rows[1][3]), seed)


def write_pseudo_labels(path: str | Path, pl: PseudoLabelMap) -> None:
    write_pgm16(path, pl.labels)


def read_pseudo_labels(path: str | Path) -> PseudoLabelMap:
    return PseudoLabelMap(read_pgm(path))
