"""Desk-scale segmentation trainer.

A synthetic multi-class shape dataset, a per-pixel MLP over a square intensity
patch (tanh hidden layer), hand-written backprop and Adam. Every loss in
:mod:`calmargin.losses` plugs in through its logit gradient.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import LossConfig, compound_loss
from .metrics import DEFAULT_BINS, dsc, ece, foreground_mask
from .tensor_store import ValidationError, softmax

log = logging.getLogger(__name__)

MAX_RETRIES = 50


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


def seed_for(root_seed: int, purpose: str) -> np.random.SeedSequence:
    """Independent stream per purpose ("data", "init", "batching", "noise", ...)."""
    tag = [ord(c) for c in purpose]
    return np.random.SeedSequence([int(root_seed), *tag])


def rng_for(root_seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(seed_for(root_seed, purpose))


# ---------------------------------------------------------------- data

@dataclass
class SyntheticTask:
    seed: int = 0
    size: int = 32
    num_classes: int = 4
    noise_sigma: float = 0.1
    # per-image additive intensity offset ~ U(-jitter, jitter); acquisition variability
    intensity_jitter: float = 0.1
    intensities: list[float] | None = None
    min_radius: float = 4.0
    max_radius: float = 9.0
    n_train: int = 8
    n_val: int = 4
    n_test: int = 16

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.size < 4:
            raise ValidationError("size must be >= 4")
        if self.noise_sigma < 0 or self.intensity_jitter < 0:
            raise ValidationError("noise levels must be >= 0")
        if not 0 < self.min_radius <= self.max_radius:
            raise ValidationError("need 0 < min_radius <= max_radius")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValidationError("every split needs at least one image")
        if self.intensities is None:
            self.intensities = list(np.linspace(0.15, 0.85, self.num_classes))
        if len(self.intensities) != self.num_classes:
            raise ValidationError("need one base intensity per class")
        if any(not 0.0 <= v <= 1.0 for v in self.intensities):
            raise ValidationError("base intensities must lie in [0, 1]")


@dataclass
class Split:
    images: np.ndarray  # (N, H, W) in [0, 1]
    labels: np.ndarray  # (N, H, W) int

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class Datasets:
    train: Split
    val: Split
    test: Split


def _label_map(task: SyntheticTask, rng: np.random.Generator) -> np.ndarray:
    n = task.size
    yy, xx = np.mgrid[0:n, 0:n]
    lab = np.zeros((n, n), dtype=np.int64)
    for c in range(1, task.num_classes):
        r = rng.uniform(task.min_radius, task.max_radius)
        cy, cx = rng.uniform(r, n - r, size=2)
        if rng.random() < 0.5:
            shape = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            ry, rx = r * rng.uniform(0.6, 1.0, size=2)
            shape = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        lab[shape] = c
    return lab


def _make_split(task: SyntheticTask, count: int, rng: np.random.Generator) -> Split:
    base = np.asarray(task.intensities, dtype=np.float64)
    images, labels = [], []
    for _ in range(count):
        for _attempt in range(MAX_RETRIES):
            lab = _label_map(task, rng)
            if len(np.unique(lab)) == task.num_classes:
                break
        else:
            raise ValidationError("could not place every class in an image; enlarge the image or shrink shapes")
        offset = rng.uniform(-task.intensity_jitter, task.intensity_jitter) if task.intensity_jitter else 0.0
        img = base[lab] + offset
        if task.noise_sigma:
            img = img + rng.normal(0.0, task.noise_sigma, size=img.shape)
        images.append(np.clip(img, 0.0, 1.0))
        labels.append(lab)
    return Split(np.stack(images), np.stack(labels))


def generate_dataset(task: SyntheticTask) -> Datasets:
    """Train/val/test splits; a pure function of ``task``. Every class appears in every image."""
    rng = rng_for(task.seed, "data")
    train = _make_split(task, task.n_train, rng)
    val = _make_split(task, task.n_val, rng)
    test = _make_split(task, task.n_test, rng)
    return Datasets(train, val, test)


def perturb_gaussian(images: np.ndarray, sigma: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise and clamp to [0, 1]."""
    if sigma < 0:
        raise ValidationError("sigma must be >= 0")
    images = np.asarray(images, dtype=np.float64)
    if sigma == 0:
        return images.copy()
    rng = rng if rng is not None else np.random.default_rng()
    return np.clip(images + rng.normal(0.0, sigma, size=images.shape), 0.0, 1.0)


# ---------------------------------------------------------------- model

def patch_features(images: np.ndarray, radius: int) -> np.ndarray:
    """(N, H, W) -> (N, H, W, (2r+1)^2) intensity patches, edge-padded."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    n, h, w = images.shape
    p = np.pad(images, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    k = 2 * radius + 1
    feats = [p[:, i : i + h, j : j + w] for i in range(k) for j in range(k)]
    return np.stack(feats, axis=-1)


@dataclass
class PixelModel:
    radius: int = 1
    hidden: int = 32
    num_classes: int = 4
    params: np.ndarray = field(default=None, repr=False)
    # fixed (not learned) map of [0, 1] intensities onto [-2, 2]
    input_center: float = 0.5
    input_scale: float = 4.0

    def __post_init__(self):
        if self.radius < 0 or self.hidden < 1 or self.num_classes < 2:
            raise ValidationError("invalid model dimensions")
        if self.params is None:
            self.params = np.zeros(self.num_params)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.num_params,):
            raise ValidationError(f"expected {self.num_params} parameters, got {self.params.shape}")

    @property
    def num_features(self) -> int:
        return (2 * self.radius + 1) ** 2

    @property
    def num_params(self) -> int:
        f, h, k = self.num_features, self.hidden, self.num_classes
        return f * h + h + h * k + k

    def unpack(self, flat: np.ndarray | None = None):
        flat = self.params if flat is None else flat
        f, h, k = self.num_features, self.hidden, self.num_classes
        i = 0
        w1 = flat[i : i + f * h].reshape(f, h); i += f * h
        b1 = flat[i : i + h]; i += h
        w2 = flat[i : i + h * k].reshape(h, k); i += h * k
        b2 = flat[i : i + k]
        return w1, b1, w2, b2

    def init(self, rng: np.random.Generator) -> "PixelModel":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        f, h, k = self.num_features, self.hidden, self.num_classes
        a1, a2 = 1.0 / math.sqrt(f), 1.0 / math.sqrt(h)
        self.params = np.concatenate([
            rng.uniform(-a1, a1, f * h), np.zeros(h),
            rng.uniform(-a2, a2, h * k), np.zeros(k),
        ])
        return self

    def copy(self) -> "PixelModel":
        return PixelModel(self.radius, self.hidden, self.num_classes, self.params.copy(), self.input_center, self.input_scale)

    def features(self, images: np.ndarray) -> np.ndarray:
        return (patch_features(images, self.radius) - self.input_center) * self.input_scale

    def forward(self, images: np.ndarray, params: np.ndarray | None = None):
        """Logits (N, H, W, K) and the cache needed by :meth:`backward`."""
        w1, b1, w2, b2 = self.unpack(params)
        x = self.features(images)
        a = np.tanh(x @ w1 + b1)
        return a @ w2 + b2, (x, a)

    def logits(self, images: np.ndarray) -> np.ndarray:
        return self.forward(images)[0]

    def backward(self, cache, grad_logits: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        _, _, w2, _ = self.unpack(params)
        x, a = cache
        k = self.num_classes
        g = grad_logits.reshape(-1, k)
        a2 = a.reshape(-1, a.shape[-1])
        x2 = x.reshape(-1, x.shape[-1])
        dw2 = a2.T @ g
        db2 = g.sum(axis=0)
        dz = (g @ w2.T) * (1.0 - a2 * a2)
        dw1 = x2.T @ dz
        db1 = dz.sum(axis=0)
        return np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])

    def loss_and_grad(self, images, labels, loss: LossConfig, params: np.ndarray | None = None):
        out, cache = self.forward(images, params)
        ev = compound_loss(loss, out, labels)
        return ev.value, self.backward(cache, ev.grad, params)


# ---------------------------------------------------------------- optimization

@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainSchedule:
    epochs: int = 200
    batch_size: int = 4
    # (first epoch, learning rate), sorted by epoch; a 10x drop at half time
    lr_stages: list[tuple[int, float]] = field(default_factory=lambda: [(0, 1e-2), (100, 1e-3)])
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.lr_stages = [(int(e), float(lr)) for e, lr in self.lr_stages]
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if not self.lr_stages or self.lr_stages[0][0] != 0:
            raise ValidationError("the first lr stage must start at epoch 0")
        starts = [e for e, _ in self.lr_stages]
        if starts != sorted(starts) or any(not 0 <= e <= self.epochs for e in starts):
            raise ValidationError("lr stage boundaries must be sorted and within [0, epochs]")
        if any(lr < 0 for _, lr in self.lr_stages):
            raise ValidationError("learning rates must be >= 0")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_stages[0][1]
        for start, rate in self.lr_stages:
            if epoch >= start:
                lr = rate
        return lr


@dataclass
class TrainResult:
    model: PixelModel
    log: list[dict]
    best_epoch: int


def evaluate_split(model: PixelModel, split: Split, background: int = 0, num_bins: int = DEFAULT_BINS):
    """(mean foreground DSC over images, pooled foreground ECE)."""
    probs = softmax(model.logits(split.images))
    pred = probs.argmax(axis=-1)
    k = model.num_classes
    dscs = [dsc(pred[i], split.labels[i], k, background)[1] for i in range(len(split))]
    mask = foreground_mask(pred, split.labels, background)
    e = ece(probs, split.labels, mask, num_bins)[0] if mask.any() else float("nan")
    return float(np.mean(dscs)), e


def train(
    model: PixelModel,
    data: Datasets,
    loss: LossConfig,
    schedule: TrainSchedule,
    rng: np.random.Generator,
    background: int = 0,
    num_bins: int = DEFAULT_BINS,
) -> TrainResult:
    """Minibatch Adam; keeps the parameters with the best validation DSC.

    ``rng`` drives the batch order only. The per-epoch ``train_loss`` is the
    loss on the whole training split after the epoch.
    """
    if data.train.images.shape[1:] != data.val.images.shape[1:]:
        raise ValidationError("train and val image shapes differ")
    params = model.params.copy()
    opt = Adam(schedule.beta1, schedule.beta2, schedule.eps)
    n = len(data.train)
    best, best_dsc, best_epoch = params.copy(), -np.inf, -1
    history = []
    work = model.copy()
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n, schedule.batch_size):
            idx = np.sort(order[start : start + schedule.batch_size])
            value, grad = model.loss_and_grad(data.train.images[idx], data.train.labels[idx], loss, params)
            if not (math.isfinite(value) and np.all(np.isfinite(grad))):
                raise NumericalError(
                    f"non-finite loss/gradient at epoch {epoch}, batch starting {start} "
                    f"(loss={value}, |params|_max={np.abs(params).max():.3g})"
                )
            params = opt.step(params, grad, lr)
        work.params = params
        train_value = compound_loss(loss, work.logits(data.train.images), data.train.labels).value
        if not math.isfinite(train_value):
            raise NumericalError(f"non-finite training loss after epoch {epoch}")
        val_dsc, val_ece = evaluate_split(work, data.val, background, num_bins)
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_value, "val_dsc": val_dsc, "val_ece": val_ece})
        log.debug("epoch %d lr %g loss %.6f val_dsc %.4f val_ece %.4f", epoch, lr, train_value, val_dsc, val_ece)
        if val_dsc > best_dsc:
            best, best_dsc, best_epoch = params.copy(), val_dsc, epoch
    trained = model.copy()
    trained.params = best
    return TrainResult(trained, history, best_epoch)


# ---------------------------------------------------------------- logit analysis

@dataclass
class LogitProfile:
    means: dict[int, np.ndarray]
    counts: dict[int, int]
    omitted: list[int]

    def max_distances(self) -> dict[int, float]:
        """Largest gap between the top mean logit and any other class, per gt class."""
        return {c: float(m.max() - m.min()) for c, m in self.means.items()}

    def sorted_report(self) -> dict[int, list[float]]:
        """Mean logit vectors sorted in decreasing order."""
        return {c: sorted(m.tolist(), reverse=True) for c, m in self.means.items()}

    def to_json(self) -> dict:
        return {
            "means": {str(c): m.tolist() for c, m in self.means.items()},
            "counts": {str(c): n for c, n in self.counts.items()},
            "omitted": list(self.omitted),
        }


def logit_distance_profile(model: PixelModel, split: Split, include_background: bool = True, background: int = 0) -> LogitProfile:
    """Mean logit vector over the pixels of each ground-truth class."""
    out = model.logits(split.images)
    k = model.num_classes
    flat = out.reshape(-1, k)
    lab = split.labels.reshape(-1)
    means, counts, omitted = {}, {}, []
    for c in range(k):
        if c == background and not include_background:
            continue
        sel = lab == c
        cnt = int(sel.sum())
        if cnt == 0:
            log.info("class %d has no pixels; omitted from the logit profile", c)
            omitted.append(c)
            continue
        means[c] = flat[sel].mean(axis=0)
        counts[c] = cnt
    return LogitProfile(means, counts, omitted)


def config_dict(obj) -> dict:
    return asdict(obj)


def fit_model(
    seed: int,
    loss: LossConfig,
    task: SyntheticTask | None = None,
    schedule: TrainSchedule | None = None,
    data: Datasets | None = None,
    radius: int = 1,
    hidden: int = 32,
    background: int = 0,
) -> TrainResult:
    """Train one model with the standard per-purpose seed split (init and batching per method)."""
    task = task or SyntheticTask(seed=seed)
    data = data or generate_dataset(task)
    model = PixelModel(radius=radius, hidden=hidden, num_classes=task.num_classes)
    model.init(rng_for(seed, f"init:{loss.name}"))
    return train(model, data, loss, schedule or TrainSchedule(), rng_for(seed, f"batch:{loss.name}"), background)
