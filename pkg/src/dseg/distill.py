"""Per-pixel classifier, masked teacher loss, segment majority-vote refinement and student loss."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import GROUND, IGNORE
from .projection import ImageSegmentMap

MAGIC = b"DSEGCLS1"
NUM_PIXEL_FEATURES = 9
LUMA = np.array([0.299, 0.587, 0.114])


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trajectory: list[tuple[int, float, float]]):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass
class ClassifierParams:
    w1: np.ndarray  # F x hidden
    b1: np.ndarray
    w2: np.ndarray  # hidden x k
    b2: np.ndarray
    seed: int = 0

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.w1.shape[0], self.w1.shape[1], self.w2.shape[1]

    @property
    def k(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def init(cls, n_features: int, hidden: int, k: int, seed: int) -> "ClassifierParams":
        rng = np.random.default_rng(seed)
        w1 = rng.uniform(-0.1, 0.1, size=(n_features, hidden))
        b1 = rng.uniform(-0.1, 0.1, size=hidden)
        w2 = rng.uniform(-0.1, 0.1, size=(hidden, k))
        b2 = rng.uniform(-0.1, 0.1, size=k)
        return cls(w1, b1, w2, b2, seed)

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(*(a.copy() for a in self.arrays()), seed=self.seed)


@dataclass
class PixelPredictionMap:
    probs: np.ndarray  # H x W x k
    logits: np.ndarray | None = None

    @property
    def argmax(self) -> np.ndarray:
        """Labels in 1..k."""
        return self.probs.argmax(axis=-1) + 1

    @property
    def k(self) -> int:
        return self.probs.shape[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def prediction_from_logits(logits: np.ndarray) -> PixelPredictionMap:
    logits = np.asarray(logits, dtype=np.float64)
    return PixelPredictionMap(softmax(logits), logits)


# -- pixel features ----------------------------------------------------------

def _clamped_shift(a: np.ndarray, dr: int, dc: int) -> np.ndarray:
    h, w = a.shape
    r = np.clip(np.arange(h) + dr, 0, h - 1)
    c = np.clip(np.arange(w) + dc, 0, w - 1)
    return a[np.ix_(r, c)]


def pixel_features(image: np.ndarray) -> np.ndarray:
    """H x W x 9: rgb/255, (u/W, v/H), 3x3 luma mean and std, |d/du| and |d/dv| of luma."""
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    h, w, _ = rgb.shape
    luma = rgb @ LUMA
    shifts = [_clamped_shift(luma, dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)]
    stack = np.stack(shifts)
    mean = stack.mean(axis=0)
    std = np.sqrt(np.maximum((stack ** 2).mean(axis=0) - mean ** 2, 0.0))
    gx = np.abs(_clamped_shift(luma, 0, 1) - _clamped_shift(luma, 0, -1)) / 2
    gy = np.abs(_clamped_shift(luma, 1, 0) - _clamped_shift(luma, -1, 0)) / 2
    vv, uu = np.mgrid[0:h, 0:w]
    return np.concatenate([rgb, np.stack([uu / w, vv / h, mean, std, gx, gy], axis=-1)], axis=-1)


# -- classifier --------------------------------------------------------------

def _check_features(params: ClassifierParams, feats: np.ndarray) -> None:
    if feats.shape[-1] != params.w1.shape[0]:
        raise ValueError(f"feature dimension {feats.shape[-1]} != classifier input {params.w1.shape[0]}")


def _forward(params: ClassifierParams, x: np.ndarray):
    hidden = np.tanh(x @ params.w1 + params.b1)
    return hidden, hidden @ params.w2 + params.b2


def classifier_forward(params: ClassifierParams, feats: np.ndarray) -> PixelPredictionMap:
    feats = np.asarray(feats, dtype=np.float64)
    _check_features(params, feats)
    lead = feats.shape[:-1]
    _, logits = _forward(params, feats.reshape(-1, feats.shape[-1]))
    return prediction_from_logits(logits.reshape(lead + (params.k,)))


def _backward(params: ClassifierParams, x: np.ndarray, hidden: np.ndarray,
              g_logits: np.ndarray) -> list[np.ndarray]:
    gw2 = hidden.T @ g_logits
    gb2 = g_logits.sum(axis=0)
    g_pre = (g_logits @ params.w2.T) * (1.0 - hidden ** 2)
    return [x.T @ g_pre, g_pre.sum(axis=0), gw2, gb2]


# -- losses ------------------------------------------------------------------

def _log_probs(pred: PixelPredictionMap) -> np.ndarray:
    if pred.logits is not None:
        return log_softmax(pred.logits)
    with np.errstate(divide="ignore"):
        return np.log(pred.probs)


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    return (labels[..., None] == np.arange(1, k + 1)).astype(np.float64)


def teacher_loss(pred: PixelPredictionMap, M: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy over pseudo-labelled pixels only, averaged over their count.

    Returns the loss and its gradient with respect to the logits.
    """
    M = np.asarray(getattr(M, "labels", M))
    if M.shape != pred.probs.shape[:-1]:
        raise ValueError(f"label shape {M.shape} != prediction shape {pred.probs.shape[:-1]}")
    k = pred.k
    valid = M != IGNORE
    if (M[valid] < 1).any() or (M[valid] > k).any():
        raise ValueError("pseudo-label outside 1..k")
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(pred.probs)
    target = np.where(valid, M, 1)
    logp = _log_probs(pred)
    picked = np.take_along_axis(logp, (target - 1)[..., None], axis=-1)[..., 0]
    loss = float(-(picked * valid).sum() / n)
    grad = (pred.probs - _onehot(target, k)) * (valid[..., None] / n)
    return loss, grad


def student_loss(refined: np.ndarray, pred: PixelPredictionMap) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over all H x W pixels against the refined teacher map."""
    refined = np.asarray(getattr(refined, "labels", refined))
    if refined.shape != pred.probs.shape[:-1]:
        raise ValueError(f"label shape {refined.shape} != prediction shape {pred.probs.shape[:-1]}")
    k = pred.k
    if (refined < 1).any() or (refined > k).any():
        raise ValueError("refined label outside 1..k")
    n = refined.size
    logp = _log_probs(pred)
    picked = np.take_along_axis(logp, (refined - 1)[..., None], axis=-1)[..., 0]
    loss = float(-picked.sum() / n)
    grad = (pred.probs - _onehot(refined, k)) / n
    return loss, grad


# -- refinement --------------------------------------------------------------

def refine_predictions(pred_labels: np.ndarray, segmap: ImageSegmentMap | np.ndarray,
                       include_ground: bool = True) -> np.ndarray:
    """Majority vote of the per-pixel labels inside each segment (ties: smallest label).

    Pixels outside every segment keep their own label.
    """
    pred_labels = np.asarray(pred_labels)
    seg = np.asarray(getattr(segmap, "labels", segmap))
    if seg.shape != pred_labels.shape:
        raise ValueError(f"segment map shape {seg.shape} != prediction shape {pred_labels.shape}")
    out = pred_labels.copy()
    region = seg != IGNORE
    if not include_ground:
        region &= seg != GROUND
    if not region.any():
        return out
    pairs = np.stack([seg[region], pred_labels[region]], axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    # rows sorted by (segment, label): first maximum per segment is the smallest label
    winner: dict[int, int] = {}
    best: dict[int, int] = {}
    for (sid, lab), n in zip(uniq.tolist(), counts.tolist()):
        if n > best.get(sid, 0):
            best[sid] = n
            winner[sid] = lab
    sids = np.array(sorted(winner))
    labs = np.array([winner[s] for s in sids])
    pos = np.searchsorted(sids, seg[region])
    out[region] = labs[pos]
    return out


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainHyper:
    lr: float = 2e-4
    batch: int = 4
    epochs: int = 10
    seed: int = 0
    hidden: int = 32
    pixels_per_frame: int | None = 2048
    optimizer: str = "adam"
    power: float = 0.9
    augment: bool = False
    crop_size: int = 512


@dataclass
class TrainResult:
    params: ClassifierParams
    log: list[tuple[int, float, float]] = field(default_factory=list)


def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    return base * (1.0 - step / total) ** power if total > 0 else base


def _random_crop(rng: np.random.Generator, shape: tuple[int, int], size: int):
    h, w = shape
    ch, cw = min(size, h), min(size, w)
    r0 = int(rng.integers(h - ch + 1))
    c0 = int(rng.integers(w - cw + 1))
    return slice(r0, r0 + ch), slice(c0, c0 + cw)


def batch_loss_and_grad(params: ClassifierParams, feats: Sequence[np.ndarray], targets: Sequence[np.ndarray],
                        loss_kind: str) -> tuple[float, list[np.ndarray]]:
    """Mean per-image loss over a batch of (pixels x F, labels) pairs and the parameter gradient."""
    total = 0.0
    grads = [np.zeros_like(a) for a in params.arrays()]
    for x, y in zip(feats, targets):
        hidden, logits = _forward(params, x)
        pred = prediction_from_logits(logits)
        if loss_kind == "teacher":
            loss, g = teacher_loss(pred, y)
        else:
            loss, g = student_loss(y, pred)
        total += loss
        for acc, gi in zip(grads, _backward(params, x, hidden, g)):
            acc += gi
    n = len(feats)
    return total / n, [g / n for g in grads]


def train(frames: Sequence[np.ndarray], targets: Sequence[np.ndarray], loss_kind: str,
          hyper: TrainHyper = TrainHyper(), k: int | None = None,
          init: ClassifierParams | None = None) -> TrainResult:
    """Mini-batch training with polynomial learning-rate decay.

    ``frames`` are H x W x F feature maps; ``targets`` are pseudo-label maps
    (``loss_kind="teacher"``, IGNORE allowed) or refined maps (``"student"``).
    Images in a batch contribute equally, each normalized by its own pixel count.
    Parameters start from ``init`` or from a seeded uniform(-0.1, 0.1) draw with
    ``k`` outputs (default: the largest target label).
    """
    if loss_kind not in ("teacher", "student"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if not frames:
        raise ValueError("no training frames")
    if len(frames) != len(targets):
        raise ValueError("frames and targets differ in number")
    targets = [np.asarray(getattr(t, "labels", t)) for t in targets]
    for f, t in zip(frames, targets):
        if f.shape[:2] != t.shape:
            raise ValueError(f"feature map {f.shape[:2]} does not match target {t.shape}")
        if loss_kind == "student" and ((t == IGNORE).any()):
            raise ValueError("student targets must be complete (no IGNORE)")
    top = int(max(int(t[t != IGNORE].max()) if (t != IGNORE).any() else 1 for t in targets))
    if init is None:
        params = ClassifierParams.init(frames[0].shape[-1], hyper.hidden, k or top, hyper.seed)
    else:
        params = init.copy()
    if params.k < top:
        raise ValueError(f"classifier has {params.k} outputs but targets reach label {top}")
    result = TrainResult(params)
    if hyper.epochs <= 0:
        return result

    rng = np.random.default_rng([hyper.seed, 0x7EAC4])
    n = len(frames)
    steps_per_epoch = math.ceil(n / hyper.batch)
    total = hyper.epochs * steps_per_epoch
    m = [np.zeros_like(a) for a in params.arrays()]
    v = [np.zeros_like(a) for a in params.arrays()]
    step = 0
    for _epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for b0 in range(0, n, hyper.batch):
            xs, ys = [], []
            for i in order[b0:b0 + hyper.batch]:
                feat, tgt = frames[i], targets[i]
                if hyper.augment:
                    rs, cs = _random_crop(rng, tgt.shape, hyper.crop_size)
                    feat, tgt = feat[rs, cs], tgt[rs, cs]
                x = feat.reshape(-1, feat.shape[-1])
                y = tgt.reshape(-1)
                pool = np.flatnonzero(y != IGNORE) if loss_kind == "teacher" else np.arange(len(y))
                if hyper.pixels_per_frame is not None and len(pool) > hyper.pixels_per_frame:
                    pool = np.sort(rng.choice(pool, size=hyper.pixels_per_frame, replace=False))
                xs.append(x[pool])
                ys.append(y[pool])
            lr = poly_lr(hyper.lr, step, total, hyper.power)
            loss, grads = batch_loss_and_grad(params, xs, ys, loss_kind)
            result.log.append((step, loss, lr))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}", result.log)
            step += 1
            arrays = params.arrays()
            if hyper.optimizer == "sgd":
                for a, g in zip(arrays, grads):
                    a -= lr * g
            elif hyper.optimizer == "adam":
                b1, b2, eps = 0.9, 0.999, 1e-8
                for a, g, mi, vi in zip(arrays, grads, m, v):
                    mi *= b1
                    mi += (1 - b1) * g
                    vi *= b2
                    vi += (1 - b2) * g * g
                    a -= lr * (mi / (1 - b1 ** step)) / (np.sqrt(vi / (1 - b2 ** step)) + eps)
            else:
                raise ValueError(f"unknown optimizer {hyper.optimizer!r}")
    return result


# -- persistence -------------------------------------------------------------

def save_classifier(path: str | Path, params: ClassifierParams) -> None:
    """Magic, little-endian u32 (F, hidden, k), then f64 W1 (F x hidden, row-major), b1, W2, b2."""
    f, hdim, k = params.shape
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    Path(path).write_bytes(MAGIC + struct.pack("<III", f, hdim, k) + body)


def load_classifier(path: str | Path) -> ClassifierParams:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:8]!r}")
    f, hdim, k = struct.unpack("<III", data[8:20])
    sizes = [f * hdim, hdim, hdim * k, k]
    if len(data) != 20 + 8 * sum(sizes):
        raise ValueError(f"{path}: size does not match header ({f}, {hdim}, {k})")
    flat = np.frombuffer(data[20:], dtype="<f8").astype(np.float64)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return ClassifierParams(parts[0].reshape(f, hdim), parts[1], parts[2].reshape(hdim, k), parts[3])


def write_train_log(path: str | Path, log: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in log:
            w.writerow([step, repr(float(loss)), repr(float(lr))])
