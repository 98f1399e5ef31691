"""Unsupervised evaluation: confusion, Hungarian class matching, IoU/PA, confusion reports, k-NN probe."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import tomli_w

from . import IGNORE


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # C x k, rows gt classes, columns pseudo-classes 1..k

    @property
    def C(self) -> int:
        return self.counts.shape[0]

    @property
    def k(self) -> int:
        return self.counts.shape[1]

    @property
    def total_labeled(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


@dataclass(frozen=True)
class ClassMapping:
    """gt class c -> pseudo-class column j (0-based; the predicted label is j + 1)."""
    assignment: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.assignment)) != len(self.assignment):
            raise ValueError("class mapping must be injective")

    def pseudo_label(self, c: int) -> int:
        return self.assignment[c] + 1


@dataclass
class EvalReport:
    per_class_iou: list[float]  # nan for classes excluded from the mean
    miou: float | None
    pixel_accuracy: float
    mapping: ClassMapping
    unmapped_pixel_count: int
    total_labeled: int


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, num_classes: int, k: int) -> ConfusionMatrix:
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    keep = gt != IGNORE
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise ValueError(f"gt label outside 0..{num_classes - 1}")
    if p.size and (p.min() < 1 or p.max() > k):
        raise ValueError(f"predicted label outside 1..{k}")
    flat = np.bincount(g * k + (p - 1), minlength=num_classes * k)
    return ConfusionMatrix(flat.reshape(num_classes, k))


def _min_cost_assignment(cost: list[list[int]]) -> list[int]:
    """Exact O(n^2 m) Hungarian method (potentials + augmenting paths) for n <= m.

    Works on Python integers so arbitrarily large costs stay exact.
    Returns the column of every row.
    """
    n, m = len(cost), len(cost[0])
    INF = None  # larger than everything
    u = [0] * (n + 1)
    v = [0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: row matched to column j (1-based), 0 = free
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv: list = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                if minv[j] is INF or cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if delta is INF or minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            rows[p[j] - 1] = j - 1
    return rows


def hungarian_match(conf: ConfusionMatrix) -> ClassMapping:
    """Injective gt -> pseudo-class map maximizing the matched counts.

    Among optimal maps the lexicographically smallest one is returned: the profit
    is scaled past the largest possible tie-break term, and every row pays a
    base-k positional penalty for its column choice.
    """
    C, k = conf.C, conf.k
    if k < C:
        raise ValueError(f"need at least as many pseudo-classes as gt classes (k={k} < C={C})")
    if C == 0:
        return ClassMapping(())
    scale = k ** C
    counts = conf.counts.tolist()
    cost = [[-(int(counts[c][j]) * scale) + j * k ** (C - 1 - c) for j in range(k)] for c in range(C)]
    return ClassMapping(tuple(_min_cost_assignment(cost)))


def matched_profit(conf: ConfusionMatrix, mapping: ClassMapping) -> int:
    return int(sum(conf.counts[c, j] for c, j in enumerate(mapping.assignment)))


def evaluate(conf: ConfusionMatrix, mapping: ClassMapping) -> EvalReport:
    """Per-class IoU, mIoU and pixel accuracy under ``mapping``.

    Pixels of gt class c predicted as any pseudo-class other than m(c), mapped
    or not, count as false negatives of c.
    """
    counts = conf.counts.astype(np.int64)
    C = conf.C
    if len(mapping.assignment) != C:
        raise ValueError("mapping does not cover every gt class")
    cols = np.array(mapping.assignment, dtype=np.int64)
    tp = counts[np.arange(C), cols]
    fn = counts.sum(axis=1) - tp
    fp = counts[:, cols].sum(axis=0) - tp
    denom = tp + fp + fn
    iou = [float(t / d) if d > 0 else math.nan for t, d in zip(tp.tolist(), denom.tolist())]
    defined = [x for x in iou if not math.isnan(x)]
    miou = float(np.mean(defined)) if defined else None
    total = conf.total_labeled
    pa = float(tp.sum() / total) if total else 0.0
    unmapped = np.setdiff1d(np.arange(conf.k), cols)
    return EvalReport(iou, miou, pa, mapping, int(counts[:, unmapped].sum()), total)


def normalized_confusion_report(conf: ConfusionMatrix, mapping: ClassMapping) -> tuple[np.ndarray, list[int]]:
    """Row-L1-normalized confusion with matched columns first (gt order), then the rest ascending."""
    matched = list(mapping.assignment)
    order = matched + [j for j in range(conf.k) if j not in set(matched)]
    mat = conf.counts[:, order].astype(np.float64)
    sums = mat.sum(axis=1, keepdims=True)
    mat = np.divide(mat, sums, out=np.zeros_like(mat), where=sums > 0)
    return mat, order


def knn_pixel_classify(train_features, train_labels, queries, k_nn: int,
                       chunk: int = 4096) -> np.ndarray:
    """Majority label among the k_nn nearest training features (Euclidean).

    Equal distances are ordered by training index; a tie in votes goes to the
    tied label whose member ranks nearest.
    """
    X = np.asarray(train_features, dtype=np.float64)
    y = np.asarray(train_labels)
    Q = np.asarray(queries, dtype=np.float64)
    if k_nn < 1:
        raise ValueError("k_nn must be at least 1")
    if len(X) == 0:
        raise ValueError("empty training set")
    if X.ndim != 2 or Q.ndim != 2 or X.shape[1] != Q.shape[1]:
        raise ValueError(f"dimension mismatch: train {X.shape} vs queries {Q.shape}")
    kk = min(k_nn, len(X))
    out = np.empty(len(Q), dtype=y.dtype)
    for s in range(0, len(Q), chunk):
        q = Q[s:s + chunk]
        d2 = ((q[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :kk]
        for row, idx in enumerate(nearest):
            labs = y[idx].tolist()
            votes: dict = {}
            for lab in labs:
                votes[lab] = votes.get(lab, 0) + 1
            top = max(votes.values())
            out[s + row] = next(lab for lab in labs if votes[lab] == top)
    return out


# -- persistence -------------------------------------------------------------

def report_to_dict(report: EvalReport, class_names: Sequence[str] | None = None) -> dict:
    names = list(class_names) if class_names else [str(c) for c in range(len(report.per_class_iou))]
    doc: dict = {}
    if report.miou is not None:
        doc["miou"] = report.miou
    doc["miou_defined"] = report.miou is not None
    doc["pixel_accuracy"] = report.pixel_accuracy
    doc["total_labeled"] = report.total_labeled
    doc["unmapped_pixel_count"] = report.unmapped_pixel_count
    classes = []
    for c, iou in enumerate(report.per_class_iou):
        entry = {"class": c, "name": names[c], "pseudo_class": report.mapping.pseudo_label(c)}
        if not math.isnan(iou):
            entry["iou"] = iou
        classes.append(entry)
    doc["classes"] = classes
    return doc


def write_report(path: str | Path, report: EvalReport, class_names: Sequence[str] | None = None) -> None:
    Path(path).write_text(tomli_w.dumps(report_to_dict(report, class_names)))


def write_normalized_confusion(path: str | Path, matrix: np.ndarray, order: list[int],
                               class_names: Sequence[str] | None = None) -> None:
    names = list(class_names) if class_names else [str(c) for c in range(matrix.shape[0])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gt_class"] + [f"pseudo_{j + 1}" for j in order])
        for name, row in zip(names, matrix.tolist()):
            w.writerow([name] + [repr(float(x)) for x in row])
