"""Training objectives with closed-form gradients w.r.t. the logits.

Every loss takes logits of shape (..., K) and labels either as an integer map
of shape (...) or as soft targets of shape (..., K). Values are means over all
pixels; ``LossEval.grad`` has the logits' shape and is d(value)/d(logits).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_store import (
    LabelField,
    SoftLabelField,
    ValidationError,
    as_array,
    log_softmax,
)

KINDS = ("CE", "CE_DICE", "LS", "FL", "ECP", "SVLS", "MBLS_L1", "MBLS_L2")


@dataclass(frozen=True)
class LossEval:
    value: float
    grad: np.ndarray

    def __add__(self, other: "LossEval") -> "LossEval":
        return LossEval(self.value + other.value, self.grad + other.grad)

    def scaled(self, w: float) -> "LossEval":
        return LossEval(w * self.value, w * self.grad)


@dataclass
class LossConfig:
    """One training objective. Parameters irrelevant to ``kind`` are kept but unused."""

    kind: str = "CE"
    alpha: float = 0.1
    gamma: float = 2.0
    lam: float = 0.1
    margin: float = 8.0
    svls_kernel_size: int = 3
    svls_sigma: float = 1.0
    dice_weight: float = 1.0
    epsilon: float = 1e-5
    name: str = field(default="")

    def __post_init__(self):
        self.kind = str(self.kind).upper()
        if self.kind not in KINDS:
            raise ValidationError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if not self.name:
            self.name = self.kind
        k = self.kind
        if k == "LS" and not 0.0 <= self.alpha < 1.0:
            raise ValidationError("alpha must lie in [0, 1)")
        if k == "FL" and self.gamma < 0:
            raise ValidationError("gamma must be >= 0")
        if k in ("ECP", "MBLS_L1", "MBLS_L2") and self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if k in ("MBLS_L1", "MBLS_L2") and self.margin < 0:
            raise ValidationError("margin must be >= 0")
        if k == "SVLS" and (self.svls_kernel_size < 1 or self.svls_kernel_size % 2 == 0):
            raise ValidationError("svls_kernel_size must be a positive odd integer")
        if k == "SVLS" and self.svls_sigma <= 0:
            raise ValidationError("svls_sigma must be positive")
        if k == "CE_DICE" and (self.epsilon <= 0 or self.dice_weight < 0):
            raise ValidationError("CE_DICE needs epsilon > 0 and dice_weight >= 0")

    @property
    def penalty(self) -> str:
        return "L2" if self.kind == "MBLS_L2" else "L1"


# ---------------------------------------------------------------- helpers

def _logits(x) -> np.ndarray:
    return np.asarray(as_array(x), dtype=np.float64)


def _targets(labels, k: int, lead_shape) -> tuple[np.ndarray, np.ndarray | None]:
    """Return (soft targets (..., K), hard labels or None)."""
    y = as_array(labels)
    if isinstance(labels, SoftLabelField) or (y.ndim == len(lead_shape) + 1 and np.issubdtype(y.dtype, np.floating)):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != tuple(lead_shape) + (k,):
            raise ValidationError(f"soft label shape {y.shape} does not match logits {tuple(lead_shape) + (k,)}")
        return y, None
    hard = _hard(labels, k, lead_shape)
    return np.eye(k)[hard], hard


def _hard(labels, k: int, lead_shape) -> np.ndarray:
    y = as_array(labels)
    if isinstance(labels, SoftLabelField) or (y.ndim == len(lead_shape) + 1):
        raise ValidationError("this loss requires hard integer labels")
    if tuple(y.shape) != tuple(lead_shape):
        raise ValidationError(f"label shape {y.shape} does not match logits {tuple(lead_shape)}")
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.round(y)):
            raise ValidationError("hard labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValidationError("label values must lie in [0, K)")
    return y


def _gather(a: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]


def entropy(s: np.ndarray) -> np.ndarray:
    """Shannon entropy over the last axis (0 log 0 = 0)."""
    s = np.asarray(s, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(s > 0, s * np.log(np.where(s > 0, s, 1.0)), 0.0)
    return -t.sum(axis=-1)


def kl_uniform_to(logits) -> np.ndarray:
    """KL(u || softmax(l)) per pixel, with u the uniform distribution."""
    ls = log_softmax(logits)
    k = ls.shape[-1]
    return -np.log(k) - ls.mean(axis=-1)


def kl_to_uniform(s: np.ndarray) -> np.ndarray:
    """KL(s || u) per pixel."""
    k = s.shape[-1]
    return np.log(k) - entropy(s)


# ---------------------------------------------------------------- label transforms

def ls_transform(labels, alpha: float, num_classes: int | None = None):
    """Uniform label smoothing: y(1 - alpha) + alpha / K."""
    if not 0.0 <= alpha < 1.0:
        raise ValidationError("alpha must lie in [0, 1)")
    if num_classes is None:
        if not isinstance(labels, LabelField):
            raise ValidationError("num_classes is required for raw label arrays")
        num_classes = labels.num_classes
    y = np.asarray(as_array(labels))
    onehot = np.eye(num_classes)[y]
    out = onehot * (1.0 - alpha) + alpha / num_classes
    return SoftLabelField(out) if isinstance(labels, LabelField) else out


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    r = kernel_size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def svls_transform(labels, kernel_size: int = 3, sigma: float = 1.0, num_classes: int | None = None):
    """Spatially varying label smoothing.

    Each one-hot class plane is convolved with a normalized Gaussian kernel
    (zero padding at the border), then every pixel is renormalized to sum 1.
    Works on (H, W) maps or (N, H, W) stacks.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValidationError("kernel_size must be a positive odd integer")
    if sigma <= 0:
        raise ValidationError("sigma must be positive")
    if num_classes is None:
        if not isinstance(labels, LabelField):
            raise ValidationError("num_classes is required for raw label arrays")
        num_classes = labels.num_classes
    y = np.asarray(as_array(labels))
    if y.ndim < 2:
        raise ValidationError("labels need at least two spatial dimensions")
    onehot = np.eye(num_classes)[y]
    kern = gaussian_kernel(kernel_size, sigma)
    r = kernel_size // 2
    h, w = y.shape[-2], y.shape[-1]
    pad = [(0, 0)] * (y.ndim - 2) + [(r, r), (r, r), (0, 0)]
    padded = np.pad(onehot, pad)
    out = np.zeros_like(onehot)
    for i in range(kernel_size):
        for j in range(kernel_size):
            out += kern[i, j] * padded[..., i : i + h, j : j + w, :]
    out /= out.sum(axis=-1, keepdims=True)
    return SoftLabelField(out) if isinstance(labels, LabelField) else out


# ---------------------------------------------------------------- losses

def ce_loss(logits, labels) -> LossEval:
    l = _logits(logits)
    lead, k = l.shape[:-1], l.shape[-1]
    ls = log_softmax(l)
    y, hard = _targets(labels, k, lead)
    n = max(int(np.prod(lead)), 1)
    if hard is not None:
        value = -_gather(ls, hard).sum() / n
    else:
        value = -(y * ls).sum() / n
    grad = (np.exp(ls) - y) / n
    return LossEval(float(value), grad)


def ls_loss(logits, labels, alpha: float) -> LossEval:
    l = _logits(logits)
    y = _hard(labels, l.shape[-1], l.shape[:-1])
    return ce_loss(l, ls_transform(y, alpha, num_classes=l.shape[-1]))


def focal_loss(logits, labels, gamma: float) -> LossEval:
    """-(1 - s_y)^gamma log s_y, averaged over pixels (hard labels only)."""
    if gamma < 0:
        raise ValidationError("gamma must be >= 0")
    l = _logits(logits)
    lead, k = l.shape[:-1], l.shape[-1]
    y = _hard(labels, k, lead)
    n = max(int(np.prod(lead)), 1)
    ls = log_softmax(l)
    s = np.exp(ls)
    logp = _gather(ls, y)
    p = np.exp(logp)
    # 1 - p as the sum of the other classes keeps precision when p -> 1
    q = s.sum(axis=-1) - p
    q = np.clip(q, 0.0, None)
    if gamma == 0:
        mod = np.ones_like(q)
        inner = -np.ones_like(q)
    else:
        mod = q**gamma
        with np.errstate(divide="ignore", invalid="ignore"):
            dmod = np.where(q > 0, gamma * q ** (gamma - 1.0) * p * logp, 0.0)
        # d f / d p * p, with f = -q^gamma log p
        inner = dmod - mod
    value = -(mod * logp).sum() / n
    onehot = np.eye(k)[y]
    grad = inner[..., None] * (onehot - s) / n
    return LossEval(float(value), grad)


def ecp_loss(logits, labels, lam: float) -> LossEval:
    """Cross-entropy minus lam times the mean prediction entropy."""
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    l = _logits(logits)
    base = ce_loss(l, labels)
    if lam == 0:
        return base
    n = max(int(np.prod(l.shape[:-1])), 1)
    ls = log_softmax(l)
    s = np.exp(ls)
    h = -(s * ls).sum(axis=-1)
    value = base.value - lam * h.sum() / n
    grad = base.grad + lam * s * (ls + h[..., None]) / n
    return LossEval(float(value), grad)


def dice_loss(logits, labels, epsilon: float = 1e-5) -> LossEval:
    """Soft Dice averaged over classes; sums run over every pixel of the input."""
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    l = _logits(logits)
    lead, k = l.shape[:-1], l.shape[-1]
    y = np.eye(k)[_hard(labels, k, lead)]
    s = np.exp(log_softmax(l))
    axes = tuple(range(l.ndim - 1))
    inter = (s * y).sum(axis=axes)
    denom = s.sum(axis=axes) + y.sum(axis=axes) + epsilon
    num = 2.0 * inter + epsilon
    value = float(np.mean(1.0 - num / denom))
    # d value / d s_pc
    gs = -(2.0 * y * denom - num) / denom**2 / k
    grad = s * (gs - (s * gs).sum(axis=-1, keepdims=True))
    return LossEval(value, grad)


def mbls_penalty(logits, margin: float, penalty_kind: str = "L1") -> LossEval:
    """Hinge on logit distances exceeding ``margin``; L1 or squared (L2)."""
    if margin < 0:
        raise ValidationError("margin must be >= 0")
    penalty_kind = penalty_kind.upper()
    if penalty_kind not in ("L1", "L2"):
        raise ValidationError("penalty_kind must be 'L1' or 'L2'")
    l = _logits(logits)
    lead, k = l.shape[:-1], l.shape[-1]
    n = max(int(np.prod(lead)), 1)
    win = np.argmax(l, axis=-1)
    d = _gather(l, win)[..., None] - l
    viol = d - margin
    active = viol > 0
    hinge = np.where(active, viol, 0.0)
    if penalty_kind == "L1":
        value = hinge.sum() / n
        w = active.astype(np.float64)
    else:
        value = (hinge**2).sum() / n
        w = 2.0 * hinge
    grad = -w
    np.put_along_axis(grad, win[..., None], (_gather(grad, win) + w.sum(axis=-1))[..., None], axis=-1)
    return LossEval(float(value), grad / n)


def mbls_loss(logits, labels, margin: float, lam: float = 0.1, penalty_kind: str = "L1") -> LossEval:
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    base = ce_loss(logits, labels)
    if lam == 0:
        mbls_penalty(logits, margin, penalty_kind)  # still validates
        return base
    return base + mbls_penalty(logits, margin, penalty_kind).scaled(lam)


def compound_loss(config: LossConfig, logits, labels) -> LossEval:
    """Dispatch on ``config.kind``. Labels are hard for every kind."""
    l = _logits(logits)
    k = l.shape[-1]
    kind = config.kind
    if kind == "CE":
        return ce_loss(l, labels)
    if kind == "CE_DICE":
        out = ce_loss(l, labels)
        if config.dice_weight:
            out = out + dice_loss(l, labels, config.epsilon).scaled(config.dice_weight)
        return out
    if kind == "LS":
        return ls_loss(l, labels, config.alpha)
    if kind == "FL":
        return focal_loss(l, labels, config.gamma)
    if kind == "ECP":
        return ecp_loss(l, labels, config.lam)
    if kind == "SVLS":
        y = _hard(labels, k, l.shape[:-1])
        return ce_loss(l, svls_transform(y, config.svls_kernel_size, config.svls_sigma, num_classes=k))
    if kind in ("MBLS_L1", "MBLS_L2"):
        return mbls_loss(l, labels, config.margin, config.lam, config.penalty)
    raise ValidationError(f"unknown loss kind {kind!r}")
