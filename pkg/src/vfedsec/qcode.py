"""Fixed-point codec between real tensors and the 32-bit residue ring.

Reals are clipped to ``[-t, t]``, mapped affinely onto ``[0, r]`` and rounded
stochastically. Quantized tensors live in ``uint32`` arrays so that masking and
aggregation get modulo-2**32 wraparound from numpy for free. A sum of ``n``
quantized addends is decoded with :func:`dequantize_sum`, which removes the
``n * t`` offset that the affine shift introduced.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

FIELD_MODULUS = 1 << 32
DEFAULT_RANGE = 1 << 27
DEFAULT_CLIP = 4.0

_HEADER = struct.Struct("<II")


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QConfig:
    """Clip threshold ``t``, target range ``r`` and the masking ring size.

    ``t_update`` is the clip threshold used for masked model updates; it
    defaults to ``t``.
    """

    t: float = DEFAULT_CLIP
    r: int = DEFAULT_RANGE
    t_update: float | None = None
    field_modulus: int = FIELD_MODULUS

    def __post_init__(self):
        if not (self.t > 0 and math.isfinite(self.t)):
            raise QuantizationError(f"clip threshold t must be positive, got {self.t}")
        if self.t_update is not None and not (self.t_update > 0 and math.isfinite(self.t_update)):
            raise QuantizationError(f"t_update must be positive, got {self.t_update}")
        if self.r < 2 or self.r & (self.r - 1):
            raise QuantizationError(f"range r must be a power of two, got {self.r}")
        if self.field_modulus != FIELD_MODULUS:
            raise QuantizationError("only the 2**32 ring is supported")
        if self.r >= self.field_modulus:
            raise QuantizationError("range r must be smaller than the ring")

    @property
    def step(self) -> float:
        """Width of one quantization bucket, ``2t / r``."""
        return 2.0 * self.t / self.r

    @property
    def max_summands(self) -> int:
        """Largest n with ``n * r < 2**32``: how many codes can be summed safely."""
        return (self.field_modulus - 1) // self.r

    def for_updates(self) -> "QConfig":
        """Config used when quantizing model updates."""
        t = self.t if self.t_update is None else self.t_update
        return QConfig(t=t, r=self.r, t_update=t, field_modulus=self.field_modulus)

    def check_summands(self, n: int) -> None:
        if n > self.max_summands:
            raise QuantizationError(
                f"{n} summands overflow the 2**32 ring at r={self.r} "
                f"(at most {self.max_summands})"
            )


def _scaled(x: np.ndarray, cfg: QConfig) -> np.ndarray:
    return (np.clip(x, -cfg.t, cfg.t) + cfg.t) / (2.0 * cfg.t) * cfg.r


def quantize_scalar(x: float, cfg: QConfig, rng: np.random.Generator) -> int:
    if not math.isfinite(x):
        raise QuantizationError("non-finite input")
    return int(quantize_matrix(np.array([[x]], dtype=np.float64), cfg, rng)[0, 0])


def quantize_matrix(x: np.ndarray, cfg: QConfig, rng: np.random.Generator) -> np.ndarray:
    """Element-wise stochastic quantization; returns a ``uint32`` array of the same shape."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise QuantizationError("non-finite input")
    v = _scaled(x, cfg)
    lo = np.floor(v)
    # round up with probability equal to the fractional part
    up = rng.random(v.shape) < (v - lo)
    return (lo + up).astype(np.uint32)


def dequantize_sum(s: np.ndarray, n_summands: int, cfg: QConfig) -> np.ndarray:
    """Decode a modular sum of ``n_summands`` quantized addends back to reals."""
    if n_summands <= 0:
        raise QuantizationError(f"n_summands must be positive, got {n_summands}")
    s = np.asarray(s, dtype=np.uint32)
    return s.astype(np.float64) * cfg.step - n_summands * cfg.t


def add_mod(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.uint32)
    b = np.asarray(b, dtype=np.uint32)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def sum_mod(mats) -> np.ndarray:
    mats = [np.asarray(m, dtype=np.uint32) for m in mats]
    if not mats:
        raise ValueError("nothing to sum")
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise ValueError("shape mismatch in modular sum")
    return np.sum(np.stack(mats), axis=0, dtype=np.uint32)


def encode_qmatrix(q: np.ndarray) -> bytes:
    """(rows, cols) as little-endian uint32 followed by the row-major words."""
    q = np.asarray(q, dtype=np.uint32)
    if q.ndim != 2:
        raise ValueError("QMatrix must be two-dimensional")
    return _HEADER.pack(*q.shape) + q.astype("<u4").tobytes()


def decode_qmatrix(buf: bytes) -> np.ndarray:
    rows, cols = _HEADER.unpack_from(buf)
    body = buf[_HEADER.size:]
    if len(body) != 4 * rows * cols:
        raise ValueError(f"QMatrix body has {len(body)} bytes, expected {4 * rows * cols}")
    return np.frombuffer(body, dtype="<u4").astype(np.uint32).reshape(rows, cols)


def encode_real(x: np.ndarray, dtype: str = "<f4") -> bytes:
    """Real-valued payload; float32 by default, the same word width as a QMatrix."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError("matrix must be two-dimensional")
    return _HEADER.pack(*x.shape) + x.astype(dtype).tobytes()


def decode_real(buf: bytes, dtype: str = "<f4") -> np.ndarray:
    rows, cols = _HEADER.unpack_from(buf)
    body = buf[_HEADER.size:]
    width = np.dtype(dtype).itemsize
    if len(body) != width * rows * cols:
        raise ValueError("real matrix body length mismatch")
    return np.frombuffer(body, dtype=dtype).astype(np.float64).reshape(rows, cols)
