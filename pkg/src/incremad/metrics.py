"""Detection error rates, time-integrated summaries and Borda ranking over time.

Scores follow the detection convention: higher means "more likely morphed".
A sample is flagged as an attack when its score is strictly above the
threshold, so ``BPCER(t) = #{b > t} / N`` and ``APCER(t) = 1 - #{m > t} / M``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ._backend import kernels
from .errors import ConfigError, MetricError, ShapeError


@dataclass(frozen=True)
class ScoreSet:
    bona: np.ndarray
    morph: np.ndarray

    def __init__(self, bona, morph):
        bona = np.asarray(bona, dtype=np.float64).reshape(-1)
        morph = np.asarray(morph, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(bona)) and np.all(np.isfinite(morph))):
            raise MetricError("scores must be finite")
        object.__setattr__(self, "bona", bona)
        object.__setattr__(self, "morph", morph)

    @classmethod
    def from_predictions(cls, morph_prob, labels, morph_class: int = 1) -> "ScoreSet":
        morph_prob = np.asarray(morph_prob, dtype=np.float64)
        labels = np.asarray(labels)
        if morph_prob.shape != labels.shape:
            raise ShapeError(f"{morph_prob.shape} scores vs {labels.shape} labels")
        return cls(morph_prob[labels != morph_class], morph_prob[labels == morph_class])

    def _require_both(self):
        if self.bona.size == 0 or self.morph.size == 0:
            raise MetricError("need at least one bona fide and one morph score")


@dataclass
class MetricRecord:
    experience_index: int
    eer: float
    bpcer_at_10pct: float
    bpcer_at_1pct: float
    bpcer_at_01pct: float
    top1_accuracy: float
    mad_point: float

    def as_dict(self) -> dict:
        return asdict(self)


def bpcer(scores: ScoreSet, tau: float) -> float:
    if scores.bona.size == 0:
        raise MetricError("BPCER needs at least one bona fide score")
    return np.count_nonzero(scores.bona > tau) / scores.bona.size


def apcer(scores: ScoreSet, tau: float) -> float:
    if scores.morph.size == 0:
        raise MetricError("APCER needs at least one morph score")
    return np.count_nonzero(scores.morph <= tau) / scores.morph.size


def candidate_thresholds(scores: ScoreSet) -> np.ndarray:
    """-inf, every distinct score, and the midpoints between neighbours (ascending).

    Both error rates are step functions that only change at score values, so
    this set reaches every attainable (BPCER, APCER) pair.
    """
    values = np.unique(np.concatenate([scores.bona, scores.morph]))
    mids = (values[:-1] + values[1:]) / 2.0
    out = np.empty(1 + values.size + mids.size)
    out[0] = -np.inf
    out[1::2] = values
    out[2::2] = mids
    return out


def error_curves(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, BPCER, APCER) over :func:`candidate_thresholds`."""
    scores._require_both()
    thr = candidate_thresholds(scores)
    above_b = kernels.count_above(np.sort(scores.bona), thr)
    above_m = kernels.count_above(np.sort(scores.morph), thr)
    m = scores.morph.size
    # counted from below so that e.g. 1/100 stays exactly 0.01
    return thr, above_b / scores.bona.size, (m - above_m) / m


def eer(scores: ScoreSet) -> float:
    """Mean of BPCER and APCER where they are closest; ties go to the lower threshold."""
    _, b, a = error_curves(scores)
    idx = int(np.argmin(np.abs(b - a)))
    return (b[idx] + a[idx]) / 2.0


def bpcer_at_apcer(scores: ScoreSet, x: float) -> float:
    """Lowest BPCER over thresholds with APCER <= x (1.0 when none qualifies)."""
    if not 0.0 < x < 1.0:
        raise ConfigError(f"APCER bound must lie in (0, 1), got {x}")
    _, b, a = error_curves(scores)
    ok = a <= x
    return float(b[ok].min()) if ok.any() else 1.0


def mad_point(scores: ScoreSet) -> float:
    return eer(scores) + bpcer_at_apcer(scores, 0.01)


def mad_record(experience_index: int, morph_prob, labels, predictions=None,
               morph_class: int = 1) -> MetricRecord:
    labels = np.asarray(labels)
    scores = ScoreSet.from_predictions(morph_prob, labels, morph_class)
    if predictions is None:
        predictions = (np.asarray(morph_prob) > 0.5).astype(labels.dtype)
    e = eer(scores)
    b1 = bpcer_at_apcer(scores, 0.01)
    return MetricRecord(
        experience_index=experience_index,
        eer=e,
        bpcer_at_10pct=bpcer_at_apcer(scores, 0.1),
        bpcer_at_1pct=b1,
        bpcer_at_01pct=bpcer_at_apcer(scores, 0.001),
        top1_accuracy=top1_accuracy(predictions, labels),
        mad_point=e + b1,
    )


def classification_record(experience_index: int, predictions, labels) -> MetricRecord:
    nan = float("nan")
    return MetricRecord(experience_index, nan, nan, nan, nan,
                        top1_accuracy(predictions, labels), nan)


def auc_over_time(values: Sequence[float], normalization: str = "n") -> float:
    """Trapezoid over unit-spaced experiences, divided by N (or N-1).

    With the default ``"n"`` normalisation a constant sequence ``v`` maps to
    ``v (N-1) / N``. A single experience returns its value for both.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise MetricError("AUC over time needs at least one value")
    if normalization not in ("n", "n-1"):
        raise ConfigError(f"normalization must be 'n' or 'n-1', got {normalization!r}")
    if v.size == 1:
        return float(v[0])
    area = float(np.sum((v[:-1] + v[1:]) / 2.0))
    return area / (v.size if normalization == "n" else v.size - 1)


def _as_table(table) -> np.ndarray:
    if isinstance(table, np.ndarray):
        arr = table
    else:
        rows = [list(r) for r in table]
        if len({len(r) for r in rows}) > 1:
            raise ShapeError("ranking table is ragged")
        arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"ranking table must be |A| x N, got shape {arr.shape}")
    return arr.astype(np.float64)


def borda_points(table, lower_is_better: bool = True) -> np.ndarray:
    """Integer Borda points per (algorithm, testing experience).

    Rank 1 earns ``|A| - 1`` points, the last rank earns 0. Ties keep
    registration (row) order.
    """
    arr = _as_table(table)
    n_alg = arr.shape[0]
    keyed = arr if lower_is_better else -arr
    order = np.argsort(keyed, axis=0, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(1, n_alg + 1)[:, None].repeat(arr.shape[1], 1), axis=0)
    return n_alg - ranks


def brot(table, lower_is_better: bool = True) -> np.ndarray:
    """Borda ranking over time for each algorithm (row) of an |A| x N table."""
    pts = borda_points(table, lower_is_better)
    n_alg, n_exp = pts.shape
    return pts.sum(axis=1) / (n_alg * n_exp)


def top1_accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if predictions.shape != labels.shape:
        raise ShapeError(f"{predictions.size} predictions vs {labels.size} labels")
    if labels.size == 0:
        raise MetricError("accuracy needs at least one sample")
    return np.count_nonzero(predictions == labels) / labels.size
