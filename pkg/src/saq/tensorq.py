"""Per-tensor affine quantization and the SAQT binary container.

Tensors are plain float64 numpy arrays. Rounding is round-half-to-even
everywhere (``np.rint``).
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

MAGIC = b"SAQT"
VERSION = 1
DEGENERATE_EPS = 1e-8


@dataclass(frozen=True)
class QuantSpec:
    scale: float
    zero_point: int
    bit_width: int

    def __post_init__(self):
        if not 2 <= self.bit_width <= 8:
            raise ValueError(f"bit_width must be in [2, 8], got {self.bit_width}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not 0 <= self.zero_point <= self.qmax:
            raise ValueError(f"zero_point {self.zero_point} outside [0, {self.qmax}]")

    @property
    def qmax(self) -> int:
        return 2**self.bit_width - 1

    @property
    def lower(self) -> float:
        return self.scale * (0 - self.zero_point)

    @property
    def upper(self) -> float:
        return self.scale * (self.qmax - self.zero_point)


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray
    spec: QuantSpec

    @property
    def shape(self):
        return self.codes.shape


def _check_finite(x: np.ndarray) -> None:
    bad = ~np.isfinite(x)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite value {x[idx]!r} at index {idx}")


def quantize(x, spec: QuantSpec) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    codes = np.clip(np.rint(x / spec.scale) + spec.zero_point, 0, spec.qmax)
    return QuantizedTensor(codes.astype(np.int64), spec)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.spec.scale * (q.codes - q.spec.zero_point).astype(np.float64)


def fake_quantize(x, spec: QuantSpec) -> np.ndarray:
    return dequantize(quantize(x, spec))


def fit_qparams_minmax(x, bit_width: int) -> QuantSpec:
    """Asymmetric min-max initialization of (scale, zero_point).

    The range always contains 0 so the clamped zero point can represent
    every input; an all-zero tensor gets its range widened by
    ``DEGENERATE_EPS`` on both sides so the scale stays positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot fit quantization parameters to an empty tensor")
    _check_finite(x)
    lo, hi = min(float(x.min()), 0.0), max(float(x.max()), 0.0)
    if hi == lo:
        lo, hi = lo - DEGENERATE_EPS, hi + DEGENERATE_EPS
    qmax = 2**bit_width - 1
    scale = (hi - lo) / qmax
    zero = int(np.clip(np.rint(-lo / scale), 0, qmax))
    return QuantSpec(scale, zero, bit_width)


# -- binary container -------------------------------------------------------
# header: magic "SAQT" | version u32 | rank u32 | extents u64[rank]
# float tensor payload:     f64[prod(extents)]
# quantized tensor payload: s f64 | z u32 | b u32 | u16[prod(extents)]
# all little-endian.

def _write_header(fh: BinaryIO, shape) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(shape)))
    fh.write(struct.pack(f"<{len(shape)}Q", *shape))


def _read_header(fh: BinaryIO) -> tuple[int, ...]:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    return struct.unpack(f"<{rank}Q", fh.read(8 * rank))


def write_tensor(fh: BinaryIO, x) -> int:
    x = np.asarray(x, dtype="<f8", order="C")
    _write_header(fh, x.shape)
    fh.write(x.tobytes(order="C"))
    return 12 + 8 * x.ndim + 8 * x.size


def read_tensor(fh: BinaryIO) -> np.ndarray:
    shape = _read_header(fh)
    n = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(fh.read(8 * n), dtype="<f8", count=n)
    return data.astype(np.float64).reshape(shape)


def write_quantized(fh: BinaryIO, q: QuantizedTensor) -> int:
    _write_header(fh, q.codes.shape)
    fh.write(struct.pack("<dII", q.spec.scale, q.spec.zero_point, q.spec.bit_width))
    fh.write(np.asarray(q.codes, dtype="<u2", order="C").tobytes(order="C"))
    return 12 + 8 * q.codes.ndim + 16 + 2 * q.codes.size


def read_quantized(fh: BinaryIO) -> QuantizedTensor:
    shape = _read_header(fh)
    scale, zero, bits = struct.unpack("<dII", fh.read(16))
    n = int(np.prod(shape, dtype=np.int64))
    codes = np.frombuffer(fh.read(2 * n), dtype="<u2", count=n).astype(np.int64)
    return QuantizedTensor(codes.reshape(shape), QuantSpec(scale, zero, bits))


def tensor_to_bytes(x) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))
