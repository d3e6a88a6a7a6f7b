"""Field containers, softmax / logit-distance primitives and the CALT file format.

CALT layout (all integers little-endian)::

    b"CALT" | u8 version | u8 dtype code | u8 rank | rank x u32 dims | payload

dtype code 0 is float64, 1 is int32. The payload is the C-order array bytes.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"CALT"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<i4")}
_CODE_OF = {np.dtype("<f8"): 0, np.dtype("<i4"): 1}
MAX_ELEMENTS = 2**34


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class TensorFormatError(ValidationError):
    """Malformed CALT file. ``code`` is one of the ``ERR_*`` constants."""

    ERR_BAD_MAGIC = "bad magic"
    ERR_BAD_VERSION = "bad version"
    ERR_DIM_OVERFLOW = "dimension overflow"
    ERR_TRUNCATED = "truncated payload"
    ERR_TRAILING = "trailing data"
    ERR_DTYPE = "dtype mismatch"

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        super().__init__(f"{code}: {detail}" if detail else code)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _check_finite(a: np.ndarray, what: str = "logits") -> None:
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{what} contain non-finite values")


@dataclass(frozen=True)
class LogitField:
    """Raw per-pixel network outputs, shape (H, W, K)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3:
            raise ValidationError(f"LogitField needs shape (H, W, K), got {a.shape}")
        h, w, k = a.shape
        if h < 1 or w < 1 or k < 2:
            raise ValidationError(f"LogitField needs H, W >= 1 and K >= 2, got {a.shape}")
        _check_finite(a)
        object.__setattr__(self, "data", _readonly(a))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LabelField:
    """Integer class map, shape (H, W), values in [0, num_classes)."""

    data: np.ndarray
    num_classes: int
    background_class: int = 0

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2:
            raise ValidationError(f"LabelField needs shape (H, W), got {a.shape}")
        if not np.issubdtype(a.dtype, np.integer):
            raise ValidationError("LabelField data must be integer")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive")
        if a.size and (a.min() < 0 or a.max() >= self.num_classes):
            raise ValidationError("label values must lie in [0, num_classes)")
        if not 0 <= self.background_class < self.num_classes:
            raise ValidationError("background_class must be < num_classes")
        object.__setattr__(self, "data", _readonly(a.astype(np.int64)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SoftLabelField:
    """Per-pixel target distributions, shape (H, W, K)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3:
            raise ValidationError(f"SoftLabelField needs shape (H, W, K), got {a.shape}")
        if np.any(a < 0) or np.any(np.abs(a.sum(-1) - 1.0) > 1e-9):
            raise ValidationError("soft labels must be non-negative and sum to 1")
        object.__setattr__(self, "data", _readonly(a))

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ProbField:
    """Per-pixel softmax vectors, shape (H, W, K)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3:
            raise ValidationError(f"ProbField needs shape (H, W, K), got {a.shape}")
        if np.any(a < 0) or np.any(np.abs(a.sum(-1) - 1.0) > 1e-9):
            raise ValidationError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "data", _readonly(a))

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]


Field = Union[LogitField, LabelField, SoftLabelField, ProbField]


def as_array(x) -> np.ndarray:
    """Unwrap a field (or pass an array-like through)."""
    return np.asarray(getattr(x, "data", x))


def argmax(logits) -> np.ndarray:
    """Class index of the largest entry along the last axis; ties go to the lowest index."""
    return np.argmax(as_array(logits), axis=-1)


def log_softmax(logits) -> np.ndarray:
    l = np.asarray(as_array(logits), dtype=np.float64)
    _check_finite(l)
    shifted = l - l.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    """Numerically stable softmax over the last axis.

    A :class:`LogitField` yields a :class:`ProbField`; plain arrays of shape
    (..., K) yield arrays.
    """
    l = np.asarray(as_array(logits), dtype=np.float64)
    _check_finite(l)
    e = np.exp(l - l.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    if isinstance(logits, LogitField):
        return ProbField(s)
    return s


def logit_distances(logits) -> np.ndarray:
    """d_k = max_j l_j - l_k for every class; zero at the winning class."""
    l = np.asarray(as_array(logits), dtype=np.float64)
    _check_finite(l)
    return l.max(axis=-1, keepdims=True) - l


def logsumexp(logits) -> np.ndarray:
    l = np.asarray(as_array(logits), dtype=np.float64)
    m = l.max(axis=-1)
    return m + np.log(np.exp(l - m[..., None]).sum(axis=-1))


# ---------------------------------------------------------------- CALT I/O

def encode_array(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if np.issubdtype(a.dtype, np.floating):
        a = a.astype("<f8", copy=False)
    elif np.issubdtype(a.dtype, np.integer):
        if a.size and (a.min() < np.iinfo(np.int32).min or a.max() > np.iinfo(np.int32).max):
            raise ValidationError("integer values do not fit in int32")
        a = a.astype("<i4", copy=False)
    else:
        raise ValidationError(f"unsupported dtype {a.dtype}")
    if a.ndim > 255:
        raise ValidationError("rank exceeds 255")
    if any(d > 0xFFFFFFFF for d in a.shape):
        raise TensorFormatError(TensorFormatError.ERR_DIM_OVERFLOW, str(a.shape))
    header = MAGIC + struct.pack("<BBB", VERSION, _CODE_OF[a.dtype], a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a).tobytes()


def decode_array(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise TensorFormatError(TensorFormatError.ERR_BAD_MAGIC)
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(TensorFormatError.ERR_BAD_VERSION, f"version {version}")
    if code not in DTYPE_CODES:
        raise TensorFormatError(TensorFormatError.ERR_DTYPE, f"unknown dtype code {code}")
    off = 7 + 4 * rank
    if len(buf) < off:
        raise TensorFormatError(TensorFormatError.ERR_TRUNCATED, "header shorter than rank")
    dims = struct.unpack_from(f"<{rank}I", buf, 7)
    n = 1
    for d in dims:
        n *= d
    if n > MAX_ELEMENTS:
        raise TensorFormatError(TensorFormatError.ERR_DIM_OVERFLOW, f"{n} elements")
    dtype = DTYPE_CODES[code]
    need = n * dtype.itemsize
    have = len(buf) - off
    if have < need:
        raise TensorFormatError(TensorFormatError.ERR_TRUNCATED, f"need {need} bytes, have {have}")
    if have > need:
        raise TensorFormatError(TensorFormatError.ERR_TRAILING, f"{have - need} extra bytes")
    return np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(dims).copy()


def write_array(a: np.ndarray, path) -> None:
    """Write ``a`` atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_array(a))
    os.replace(tmp, path)


def read_array(path) -> np.ndarray:
    return decode_array(Path(path).read_bytes())


def save_tensor(field: Field, path) -> None:
    if isinstance(field, LabelField):
        write_array(field.data.astype(np.int32), path)
    elif isinstance(field, (LogitField, SoftLabelField, ProbField)):
        write_array(field.data, path)
    else:
        raise ValidationError(f"cannot save {type(field).__name__}")


def load_tensor(path, kind: str | None = None, num_classes: int | None = None):
    """Load a CALT file as a field.

    float64 rank-3 payloads load as :class:`LogitField`, int32 rank-2 as
    :class:`LabelField`. ``kind`` ("logits" or "labels") pins the expected
    type and a mismatch raises ``dtype mismatch``.
    """
    a = read_array(path)
    is_float = a.dtype == DTYPE_CODES[0]
    if kind is None:
        kind = "logits" if is_float else "labels"
    if kind == "logits":
        if not is_float or a.ndim != 3:
            raise TensorFormatError(TensorFormatError.ERR_DTYPE, "expected float64 (H, W, K)")
        return LogitField(a)
    if kind == "labels":
        if is_float or a.ndim != 2:
            raise TensorFormatError(TensorFormatError.ERR_DTYPE, "expected int32 (H, W)")
        k = num_classes if num_classes is not None else int(a.max()) + 1 if a.size else 1
        return LabelField(a, num_classes=max(k, 1))
    raise ValidationError(f"unknown tensor kind {kind!r}")
