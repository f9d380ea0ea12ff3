"""Int8 quantization of model parameters and the LEQ1 export format.

Scheme: per-tensor symmetric, zero-point 0, codes in [-127, 127]
(-128 unused), ``scale = max|x| / 127``. An all-zero tensor gets scale 1.

LEQ1 layout (little-endian)::

    b"LEQ1" | u32 layer_count |
    per layer: u32 rows | u32 cols | f32 w_scale | i8[rows*cols] | f32 b_scale | i8[rows]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .nn import ModelParams

MAGIC = b"LEQ1"


class NonFiniteInput(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class QTensor:
    scale: float
    q: np.ndarray  # int8

    def dequantize(self) -> np.ndarray:
        return self.q.astype(np.float64) * self.scale


@dataclass(frozen=True)
class QuantizedParams:
    layers: tuple[tuple[QTensor, QTensor], ...]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.q.shape for w, _ in self.layers]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedParams) or len(self.layers) != len(other.layers):
            return False
        for (w1, b1), (w2, b2) in zip(self.layers, other.layers):
            for a, b in ((w1, w2), (b1, b2)):
                if a.scale != b.scale or a.q.shape != b.q.shape or not np.array_equal(a.q, b.q):
                    return False
        return True

    def payload_bytes(self) -> int:
        return sum(w.q.size + b.q.size for w, b in self.layers)


def tensor_scale(x: np.ndarray) -> float:
    m = float(np.max(np.abs(x))) if x.size else 0.0
    return m / 127.0 if m > 0 else 1.0


def quantize_tensor(x: np.ndarray, mode: str = "deterministic", rng: np.random.Generator | None = None,
                    scale: float | None = None) -> QTensor:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NonFiniteInput("cannot quantize non-finite values")
    s = tensor_scale(x) if scale is None else scale
    y = x / s
    if mode == "deterministic":
        q = np.rint(y)  # ties to even
    elif mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic quantization needs an rng")
        lo = np.floor(y)
        q = lo + (rng.random(y.shape) < (y - lo))
    else:
        raise ValueError(f"unknown quantization mode {mode!r}")
    return QTensor(s, np.clip(q, -127, 127).astype(np.int8))


def quantize(params: ModelParams, mode: str = "deterministic", rng: np.random.Generator | None = None) -> QuantizedParams:
    return QuantizedParams(tuple(
        (quantize_tensor(w, mode, rng), quantize_tensor(b, mode, rng)) for w, b in params.layers
    ))


def dequantize(qp: QuantizedParams) -> ModelParams:
    return ModelParams([(w.dequantize(), b.dequantize()) for w, b in qp.layers])


def export_quantized(qp: QuantizedParams | ModelParams) -> bytes:
    if isinstance(qp, ModelParams):
        qp = quantize(qp)
    out = [MAGIC, struct.pack("<I", len(qp.layers))]
    for w, b in qp.layers:
        rows, cols = w.q.shape
        if b.q.shape != (rows,):
            raise FormatError(f"bias shape {b.q.shape} does not match {rows} rows")
        out.append(struct.pack("<IIf", rows, cols, w.scale))
        out.append(np.ascontiguousarray(w.q, dtype=np.int8).tobytes())
        out.append(struct.pack("<f", b.scale))
        out.append(np.ascontiguousarray(b.q, dtype=np.int8).tobytes())
    return b"".join(out)


def import_quantized(data: bytes) -> QuantizedParams:
    """Inverse of :func:`export_quantized`.

    Scales are stored as float32, so a scale that was float64 on export comes
    back rounded to float32; re-exporting the result is bit-exact.
    """
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    try:
        (n,) = struct.unpack_from("<I", data, 4)
        off = 8
        layers = []
        for _ in range(n):
            rows, cols, ws = struct.unpack_from("<IIf", data, off)
            off += 12
            wq = np.frombuffer(data, dtype=np.int8, count=rows * cols, offset=off).reshape(rows, cols).copy()
            off += rows * cols
            (bs,) = struct.unpack_from("<f", data, off)
            off += 4
            bq = np.frombuffer(data, dtype=np.int8, count=rows, offset=off).copy()
            off += rows
            layers.append((QTensor(float(ws), wq), QTensor(float(bs), bq)))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated LEQ1 stream: {exc}") from exc
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after LEQ1 payload")
    return QuantizedParams(tuple(layers))


def to_float32_scales(qp: QuantizedParams) -> QuantizedParams:
    """Round every scale to float32, as stored by LEQ1."""
    return QuantizedParams(tuple(
        (QTensor(float(np.float32(w.scale)), w.q), QTensor(float(np.float32(b.scale)), b.q))
        for w, b in qp.layers
    ))
