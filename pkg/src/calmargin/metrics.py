"""Calibration (ECE, CECE) and segmentation (DSC, ASD) metrics, plus method ranking."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .tensor_store import ValidationError, as_array

DEFAULT_BINS = 15

# metric name -> higher is better
ORIENTATION = {"dsc": True, "asd": False, "ece": False, "cece": False, "nll": False}


@dataclass
class ReliabilityTable:
    bin_edges: np.ndarray
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray

    @property
    def num_bins(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def gaps(self) -> np.ndarray:
        return np.abs(self.accuracy - self.confidence)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "accuracy", "confidence"])
        for i in range(self.num_bins):
            w.writerow([
                repr(float(self.bin_edges[i])),
                repr(float(self.bin_edges[i + 1])),
                int(self.counts[i]),
                repr(float(self.accuracy[i])),
                repr(float(self.confidence[i])),
            ])
        return buf.getvalue()


@dataclass
class MetricReport:
    method: str
    case: str
    dsc: list[float]
    asd: list[float]
    mean_dsc: float
    mean_asd: float
    ece: float
    cece: float
    nll: float

    def scores(self) -> dict[str, float]:
        return {"dsc": self.mean_dsc, "asd": self.mean_asd, "ece": self.ece, "cece": self.cece}

    def to_json(self) -> dict:
        return _nan_to_none(asdict(self))


def _nan_to_none(x):
    # NaN is not valid JSON
    if isinstance(x, dict):
        return {k: _nan_to_none(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_nan_to_none(v) for v in x]
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


@dataclass
class RankMatrix:
    methods: list[str]
    metrics: list[str]
    scores: np.ndarray  # (methods, metrics)
    higher_is_better: list[bool]
    ranks: np.ndarray  # per-metric ranks, 1 = best
    total: np.ndarray  # summed rank per method
    final: np.ndarray  # rank of the total, ascending

    def ordering(self) -> list[str]:
        return [self.methods[i] for i in np.argsort(self.final, kind="stable")]


# ---------------------------------------------------------------- masks and bins

def foreground_mask(pred, gt, background: int = 0) -> np.ndarray:
    """Pixels where the ground truth or the prediction is not background."""
    p, g = np.asarray(as_array(pred)), np.asarray(as_array(gt))
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch {p.shape} vs {g.shape}")
    return (g != background) | (p != background)


def bin_edges(num_bins: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, num_bins + 1)


def bin_index(values: np.ndarray, num_bins: int) -> np.ndarray:
    """Bin i holds values in (edge_i, edge_{i+1}]; a value of exactly 0 goes to bin 0."""
    edges = bin_edges(num_bins)
    idx = np.searchsorted(edges, values, side="left") - 1
    return np.clip(idx, 0, num_bins - 1)


def _table(conf: np.ndarray, hit: np.ndarray, num_bins: int) -> ReliabilityTable:
    idx = bin_index(conf, num_bins)
    counts = np.bincount(idx, minlength=num_bins)
    hits = np.bincount(idx, weights=hit.astype(np.float64), minlength=num_bins)
    confs = np.bincount(idx, weights=conf, minlength=num_bins)
    nz = np.maximum(counts, 1)
    acc = np.where(counts > 0, hits / nz, 0.0)
    cmean = np.where(counts > 0, confs / nz, 0.0)
    return ReliabilityTable(bin_edges(num_bins), counts, acc, cmean)


def _table_error(t: ReliabilityTable, n: int) -> float:
    return float(np.sum(t.counts / n * t.gaps()))


def _masked(probs, gt, mask):
    s = np.asarray(as_array(probs), dtype=np.float64)
    g = np.asarray(as_array(gt))
    if s.shape[:-1] != g.shape:
        raise ValidationError(f"shape mismatch {s.shape[:-1]} vs {g.shape}")
    if mask is None:
        mask = np.ones(g.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != g.shape:
        raise ValidationError("mask shape does not match labels")
    if not mask.any():
        raise ValidationError("no foreground samples")
    return s[mask], g[mask]


def ece(probs, gt, mask=None, num_bins: int = DEFAULT_BINS) -> tuple[float, ReliabilityTable]:
    """Expected calibration error over the masked pixels."""
    if num_bins < 1:
        raise ValidationError("num_bins must be >= 1")
    s, g = _masked(probs, gt, mask)
    conf = s.max(axis=-1)
    pred = s.argmax(axis=-1)
    table = _table(conf, pred == g, num_bins)
    return _table_error(table, len(g)), table


def cece(probs, gt, mask=None, num_bins: int = DEFAULT_BINS) -> tuple[float, list[ReliabilityTable]]:
    """Classwise ECE: every class probability binned on its own, errors summed over classes."""
    if num_bins < 1:
        raise ValidationError("num_bins must be >= 1")
    s, g = _masked(probs, gt, mask)
    n = len(g)
    tables = [_table(s[:, j], g == j, num_bins) for j in range(s.shape[-1])]
    return float(sum(_table_error(t, n) for t in tables)), tables


def nll(probs, gt, mask=None) -> float:
    s, g = _masked(probs, gt, mask)
    p = np.take_along_axis(s, g[:, None], axis=-1)[:, 0]
    return float(-np.mean(np.log(np.maximum(p, np.finfo(float).tiny))))


# ---------------------------------------------------------------- segmentation

def dsc(pred, gt, num_classes: int, background: int = 0) -> tuple[list[float], float]:
    """Per-class Dice (1.0 when a class is absent from both) and the foreground mean."""
    p, g = np.asarray(as_array(pred)), np.asarray(as_array(gt))
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch {p.shape} vs {g.shape}")
    per = []
    for c in range(num_classes):
        pc, gc = p == c, g == c
        inter = int(np.count_nonzero(pc & gc))
        tot = int(np.count_nonzero(pc)) + int(np.count_nonzero(gc))
        per.append(1.0 if tot == 0 else 2 * inter / tot)
    fg = [v for c, v in enumerate(per) if c != background]
    return per, float(np.mean(fg)) if fg else float("nan")


def erode4(mask: np.ndarray) -> np.ndarray:
    """Binary erosion with the 4-neighbour cross; outside the image counts as empty."""
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    return m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]


def boundary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask & ~erode4(mask)


def _mean_nearest(a: np.ndarray, b: np.ndarray) -> float:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(np.sqrt(d2.min(axis=1)).mean())


def surface_distance(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Symmetric average surface distance between two 2D binary masks (NaN if either is empty)."""
    bp = np.argwhere(boundary(pred_mask)).astype(np.float64)
    bg = np.argwhere(boundary(gt_mask)).astype(np.float64)
    if len(bp) == 0 or len(bg) == 0:
        return float("nan")
    return 0.5 * (_mean_nearest(bp, bg) + _mean_nearest(bg, bp))


def asd(pred, gt, num_classes: int, background: int = 0) -> tuple[list[float], float]:
    """Per-class ASD in pixels; undefined classes are NaN and left out of the mean."""
    p, g = np.asarray(as_array(pred)), np.asarray(as_array(gt))
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch {p.shape} vs {g.shape}")
    if p.ndim != 2:
        raise ValidationError("ASD expects 2D label maps")
    per = [surface_distance(p == c, g == c) for c in range(num_classes)]
    fg = [v for c, v in enumerate(per) if c != background and not math.isnan(v)]
    return per, float(np.mean(fg)) if fg else float("nan")


def evaluate_case(
    probs,
    gt,
    method: str = "",
    case: str = "",
    background: int = 0,
    num_bins: int = DEFAULT_BINS,
) -> MetricReport:
    """All metrics for one image. Calibration metrics use the foreground mask."""
    s = np.asarray(as_array(probs), dtype=np.float64)
    g = np.asarray(as_array(gt))
    k = s.shape[-1]
    pred = s.argmax(axis=-1)
    per_dsc, mean_dsc = dsc(pred, g, k, background)
    per_asd, mean_asd = asd(pred, g, k, background)
    mask = foreground_mask(pred, g, background)
    if mask.any():
        e, _ = ece(s, g, mask, num_bins)
        ce_, _ = cece(s, g, mask, num_bins)
        nl = nll(s, g, mask)
    else:
        e = ce_ = nl = float("nan")
    return MetricReport(method, case, per_dsc, per_asd, mean_dsc, mean_asd, e, ce_, nl)


# ---------------------------------------------------------------- ranking

def _orient(metrics: Sequence[str], higher_is_better: Mapping[str, bool] | None) -> list[bool]:
    out = []
    for m in metrics:
        if higher_is_better is not None and m in higher_is_better:
            out.append(bool(higher_is_better[m]))
        elif m.lower() in ORIENTATION:
            out.append(ORIENTATION[m.lower()])
        else:
            raise ValidationError(f"no orientation known for metric {m!r}")
    return out


def _rank_columns(scores: np.ndarray, hib: Sequence[bool]) -> np.ndarray:
    ranks = np.empty_like(scores, dtype=np.float64)
    for j, up in enumerate(hib):
        col = -scores[:, j] if up else scores[:, j]
        ranks[:, j] = rankdata(col, method="average")
    return ranks


def sum_rank(
    scores: Mapping[str, Mapping[str, float]],
    metrics: Sequence[str] | None = None,
    higher_is_better: Mapping[str, bool] | None = None,
) -> RankMatrix:
    """Rank methods per metric (1 = best, ties averaged) and order by the summed rank.

    ``scores`` maps method -> {metric: mean score}.
    """
    methods = list(scores)
    if len(methods) < 2:
        raise ValidationError("ranking needs at least two methods")
    if metrics is None:
        metrics = list(scores[methods[0]])
    metrics = list(metrics)
    table = np.empty((len(methods), len(metrics)))
    for i, m in enumerate(methods):
        for j, k in enumerate(metrics):
            if k not in scores[m]:
                raise ValidationError(f"method {m!r} is missing metric {k!r}")
            table[i, j] = float(scores[m][k])
    if np.isnan(table).any():
        raise ValidationError("scores contain NaN")
    hib = _orient(metrics, higher_is_better)
    ranks = _rank_columns(table, hib)
    total = ranks.sum(axis=1)
    final = rankdata(total, method="average")
    return RankMatrix(methods, metrics, table, hib, ranks, total, final)


@dataclass
class CaseRanking:
    methods: list[str]
    cases: list[str]
    case_ranks: np.ndarray  # (methods, cases): mean over metrics
    mean_rank: np.ndarray  # (methods,)
    final: np.ndarray

    def ordering(self) -> list[str]:
        return [self.methods[i] for i in np.argsort(self.final, kind="stable")]


def mean_case_rank(
    values: Mapping[str, Mapping[str, Mapping[str, float]]],
    metrics: Sequence[str] | None = None,
    higher_is_better: Mapping[str, bool] | None = None,
) -> CaseRanking:
    """Per case, rank methods on each metric and average over metrics; then average over cases.

    ``values`` maps method -> case -> {metric: value}.
    """
    methods = list(values)
    if len(methods) < 2:
        raise ValidationError("ranking needs at least two methods")
    cases = list(values[methods[0]])
    for m in methods:
        if set(values[m]) != set(cases):
            raise ValidationError(f"method {m!r} does not cover the same cases")
    if metrics is None:
        metrics = list(values[methods[0]][cases[0]])
    metrics = list(metrics)
    hib = _orient(metrics, higher_is_better)
    cr = np.empty((len(methods), len(cases)))
    for c_i, c in enumerate(cases):
        table = np.empty((len(methods), len(metrics)))
        for i, m in enumerate(methods):
            for j, k in enumerate(metrics):
                if k not in values[m][c]:
                    raise ValidationError(f"method {m!r} case {c!r} is missing metric {k!r}")
                table[i, j] = float(values[m][c][k])
        # an undefined metric ranks last for that case
        for j, up in enumerate(hib):
            col = table[:, j]
            if np.isnan(col).any():
                col[np.isnan(col)] = -np.inf if up else np.inf
        cr[:, c_i] = _rank_columns(table, hib).mean(axis=1)
    mean = cr.mean(axis=1)
    return CaseRanking(methods, cases, cr, mean, rankdata(mean, method="average"))
