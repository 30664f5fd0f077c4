"""Map-quality and hotspot-classification metrics, plus evaluation reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

REPORT_COLUMNS = ("avg_nrmse", "avg_ssim", "fpr", "tpr", "accuracy", "auc", "f1", "precision")


class DegenerateRangeError(ValueError):
    """Truth map is constant, so its value range is zero."""


def _arr(x) -> np.ndarray:
    a = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return np.asarray(a, dtype=np.float64)


def _squeeze2d(x) -> np.ndarray:
    a = _arr(x)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    if a.ndim != 2:
        raise ValueError(f"expected an HxW (or HxWx1) map, got shape {a.shape}")
    return a


def nrmse(truth, pred, value_range: float | None = None) -> float:
    """RMSE divided by ``max(truth) - min(truth)`` (or an explicit range)."""
    y, p = _squeeze2d(truth), _squeeze2d(pred)
    if y.shape != p.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {p.shape}")
    if value_range is None:
        value_range = float(y.max() - y.min())
        if value_range == 0.0:
            raise DegenerateRangeError("truth map is constant; NRMSE range is zero")
    return float(np.sqrt(np.mean((y - p) ** 2)) / value_range)


def ssim(x, y, win: int = 11, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully contained ``win x win`` box windows."""
    a, b = _squeeze2d(x), _squeeze2d(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < win or a.shape[1] < win:
        raise ValueError(f"image {a.shape} smaller than the {win}x{win} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    wa = sliding_window_view(a, (win, win))
    wb = sliding_window_view(b, (win, win))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = ((wa - mu_a[..., None, None]) ** 2).mean(axis=(-2, -1))
    var_b = ((wb - mu_b[..., None, None]) ** 2).mean(axis=(-2, -1))
    cov = ((wa - mu_a[..., None, None]) * (wb - mu_b[..., None, None])).mean(axis=(-2, -1))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def confusion(pred_bin, truth_bin) -> ConfusionCounts:
    p, t = _arr(pred_bin) > 0.5, _arr(truth_bin) > 0.5
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


@dataclass
class Rates:
    tpr: float
    fpr: float
    precision: float
    f1: float
    accuracy: float
    degenerate: list[str] = field(default_factory=list)


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def rates(c: ConfusionCounts) -> Rates:
    flags: list[str] = []
    tpr = _ratio(c.tp, c.tp + c.fn, "tpr", flags)
    fpr = _ratio(c.fp, c.fp + c.tn, "fpr", flags)
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    if precision + tpr == 0:
        flags.append("f1")
        f1 = 0.0
    else:
        f1 = 2 * precision * tpr / (precision + tpr)
    accuracy = _ratio(c.tp + c.tn, c.total, "accuracy", flags)
    return Rates(tpr, fpr, precision, f1, accuracy, flags)


def roc_curve(scores, truth_bin) -> tuple[np.ndarray, np.ndarray]:
    """ROC points ``(fpr, tpr)`` over every distinct score threshold, starting at (0, 0)."""
    s = _arr(scores).ravel()
    t = _arr(truth_bin).ravel() > 0.5
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    # last index of each run of equal scores
    cut = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(t)[cut]
    fps = np.cumsum(~t)[cut]
    n_pos, n_neg = t.sum(), (~t).sum()
    tpr = np.r_[0.0, tps / n_pos] if n_pos else np.zeros(cut.size + 1)
    fpr = np.r_[0.0, fps / n_neg] if n_neg else np.zeros(cut.size + 1)
    return fpr, tpr


def auc(scores, truth_bin) -> tuple[float, bool]:
    """Trapezoidal ROC area; returns ``(value, degenerate)``.

    Single-class truth is degenerate and reported as 0.5.
    """
    t = _arr(truth_bin) > 0.5
    if t.all() or not t.any():
        return 0.5, True
    fpr, tpr = roc_curve(scores, truth_bin)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0)), False


@dataclass
class TileResult:
    index: int
    nrmse: float
    ssim: float
    tp: int
    fp: int
    tn: int
    fn: int
    range_fallback: bool


@dataclass
class EvalReport:
    avg_nrmse: float
    avg_ssim: float
    fpr: float
    tpr: float
    accuracy: float
    auc: float
    f1: float
    precision: float
    threshold: float
    n_tiles: int
    degenerate: list[str]
    tiles: list[TileResult]

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_COLUMNS}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        head = "  ".join(f"{c:>10}" for c in REPORT_COLUMNS)
        row = "  ".join(f"{getattr(self, c):>10.4f}" for c in REPORT_COLUMNS)
        return f"{head}\n{row}"


def evaluate(truths, predictions, threshold: float = 0.1) -> EvalReport:
    """Per-tile NRMSE/SSIM averaged; confusion and AUC pooled over every pixel.

    ``truths`` are unamplified label maps; ground-truth hotspots are pixels > 0.
    """
    truths, predictions = list(truths), list(predictions)
    if len(predictions) != len(truths):
        raise ValueError(f"{len(truths)} tiles but {len(predictions)} predictions")
    if not truths:
        raise ValueError("nothing to evaluate")
    tiles = []
    total = ConfusionCounts(0, 0, 0, 0)
    for i, (y, p) in enumerate(zip(truths, predictions)):
        y2, p2 = _squeeze2d(y), _squeeze2d(p)
        fallback = bool(y2.max() == y2.min())
        c = confusion(p2 >= threshold, y2 > 0)
        total = total + c
        tiles.append(
            TileResult(i, nrmse(y2, p2, 1.0 if fallback else None), ssim(y2, p2), c.tp, c.fp, c.tn, c.fn, fallback)
        )
    r = rates(total)
    all_scores = np.concatenate([_squeeze2d(p).ravel() for p in predictions])
    all_truth = np.concatenate([_squeeze2d(y).ravel() > 0 for y in truths])
    area, auc_degenerate = auc(all_scores, all_truth)
    flags = list(r.degenerate) + (["auc"] if auc_degenerate else [])
    return EvalReport(
        avg_nrmse=float(np.mean([t.nrmse for t in tiles])),
        avg_ssim=float(np.mean([t.ssim for t in tiles])),
        fpr=r.fpr,
        tpr=r.tpr,
        accuracy=r.accuracy,
        auc=area,
        f1=r.f1,
        precision=r.precision,
        threshold=threshold,
        n_tiles=len(tiles),
        degenerate=flags,
        tiles=tiles,
    )
