"""Scalar temperature scaling fitted by golden-section search on log T."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .metrics import foreground_mask
from .tensor_store import LogitField, ProbField, ValidationError, as_array, log_softmax, softmax

T_MIN, T_MAX = 0.05, 20.0
INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class TemperatureFit:
    temperature: float
    nll_before: float
    nll_after: float
    iterations: int

    def to_json(self) -> dict:
        return asdict(self)


def golden_section(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-4, max_iter: int = 200):
    """Minimize a unimodal ``f`` on [lo, hi]. Returns (x, f(x), iterations)."""
    a, b = lo, hi
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    it = 0
    while b - a > tol and it < max_iter:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
        it += 1
    return (c, fc, it) if fc <= fd else (d, fd, it)


def _flatten(logits, labels, mask):
    l = np.asarray(as_array(logits), dtype=np.float64)
    y = np.asarray(as_array(labels))
    if l.shape[:-1] != y.shape:
        raise ValidationError(f"shape mismatch {l.shape[:-1]} vs {y.shape}")
    if not np.all(np.isfinite(l)):
        raise ValidationError("logits contain non-finite values")
    if mask is not None:
        l, y = l[np.asarray(mask, dtype=bool)], y[np.asarray(mask, dtype=bool)]
    l = l.reshape(-1, l.shape[-1])
    y = y.reshape(-1).astype(np.int64)
    if len(y) == 0:
        raise ValidationError("empty validation set")
    return l, y


def temperature_nll(logits: np.ndarray, labels: np.ndarray, t: float) -> float:
    """Mean NLL of softmax(l / t) on flattened (N, K) logits."""
    ls = log_softmax(logits / t)
    return float(-ls[np.arange(len(labels)), labels].mean())


def fit_temperature(
    val_logits,
    val_labels,
    foreground_only: bool = True,
    background: int = 0,
    t_bounds: tuple[float, float] = (T_MIN, T_MAX),
    tol: float = 1e-4,
) -> TemperatureFit:
    """Find T minimizing validation NLL of softmax(l / T).

    With ``foreground_only`` the pixels are restricted by the same union mask
    the calibration metrics use.
    """
    l = np.asarray(as_array(val_logits), dtype=np.float64)
    y = np.asarray(as_array(val_labels))
    mask = None
    if foreground_only:
        mask = foreground_mask(np.argmax(l, axis=-1), y, background)
    l, y = _flatten(l, y, mask)

    def obj(log_t: float) -> float:
        return temperature_nll(l, y, math.exp(log_t))

    lo, hi = math.log(t_bounds[0]), math.log(t_bounds[1])
    log_t, best, it = golden_section(obj, lo, hi, tol=tol)
    before = obj(0.0)
    # the bracket ends are candidates too: the optimum can sit on a bound
    for cand in (lo, hi):
        v = obj(cand)
        if v < best:
            log_t, best = cand, v
    if not best < before:
        log_t, best = 0.0, before
    return TemperatureFit(math.exp(log_t), before, best, it)


def apply_temperature(logits, t: float):
    if not t > 0:
        raise ValidationError("temperature must be positive")
    s = softmax(np.asarray(as_array(logits), dtype=np.float64) / t)
    return ProbField(s) if isinstance(logits, LogitField) else s
