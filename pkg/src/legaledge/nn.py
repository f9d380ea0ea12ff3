"""Dense ReLU networks in plain numpy: forward, backprop, Adam, losses, fake-quant."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_SIZES = (5, 64, 64, 11)

_version = itertools.count(1)


class ShapeMismatch(ValueError):
    pass


class StaleCache(RuntimeError):
    pass


@dataclass
class ModelParams:
    """Ordered ``(weight, bias)`` pairs; weights are ``(out, in)`` matrices."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    version: int = field(default_factory=lambda: next(_version), compare=False)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w, _ in self.layers]

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.layers[0][0].shape[1],) + tuple(w.shape[0] for w, _ in self.layers)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    @classmethod
    def from_flat(cls, shapes: Sequence[tuple[int, int]], vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        expected = sum(r * c + r for r, c in shapes)
        if vec.shape != (expected,):
            raise ShapeMismatch(f"flat vector has {vec.size} entries, manifest needs {expected}")
        layers = []
        i = 0
        for r, c in shapes:
            w = vec[i:i + r * c].reshape(r, c).copy()
            i += r * c
            b = vec[i:i + r].copy()
            i += r
            layers.append((w, b))
        return cls(layers)

    def copy(self) -> "ModelParams":
        return ModelParams([(w.copy(), b.copy()) for w, b in self.layers])

    def assign(self, other: "ModelParams") -> None:
        """Overwrite values in place from ``other`` (same manifest)."""
        if other.shapes != self.shapes:
            raise ShapeMismatch(f"{other.shapes} != {self.shapes}")
        for (w, b), (w2, b2) in zip(self.layers, other.layers):
            w[...] = w2
            b[...] = b2
        self.touch()

    def touch(self) -> None:
        self.version = next(_version)

    def zeros_like(self) -> "ModelParams":
        return ModelParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers])

    def tensors(self) -> list[np.ndarray]:
        return [t for pair in self.layers for t in pair]

    def all_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors())


def init_params(sizes: Sequence[int] = DEFAULT_SIZES, rng: np.random.Generator | int | None = None) -> ModelParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(rng)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return ModelParams(layers)


def fake_quant(x: np.ndarray) -> np.ndarray:
    """Per-tensor symmetric int8 quantize-then-dequantize."""
    m = np.max(np.abs(x)) if x.size else 0.0
    if m == 0:
        return np.zeros_like(x)
    scale = m / 127.0
    return np.clip(np.rint(x / scale), -127, 127) * scale


@dataclass
class ForwardCache:
    params_id: int
    version: int
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activations of each layer
    weights: list[np.ndarray]  # weights actually used (fake-quantized under QAT)
    squeeze: bool


def forward_cached(params: ModelParams, x: np.ndarray, qat: bool = False) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    a = x[None, :] if squeeze else x
    if a.shape[1] != params.sizes[0]:
        raise ShapeMismatch(f"input dimension {a.shape[1]} != {params.sizes[0]}")
    inputs, pre, used = [], [], []
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        w_eff = fake_quant(w) if qat else w
        inputs.append(a)
        used.append(w_eff)
        z = a @ w_eff.T + b
        pre.append(z)
        if i < last:
            a = np.maximum(z, 0.0)
            if qat:
                a = fake_quant(a)
        else:
            a = z
    cache = ForwardCache(id(params), params.version, inputs, pre, used, squeeze)
    return (a[0] if squeeze else a), cache


def forward(params: ModelParams, x: np.ndarray, qat: bool = False) -> np.ndarray:
    return forward_cached(params, x, qat)[0]


def backward(params: ModelParams, cache: ForwardCache, grad_out: np.ndarray) -> ModelParams:
    """Reverse-mode gradients of a scalar loss given dLoss/dOutput.

    Fake-quant nodes use the straight-through estimator: their gradient is
    taken as the identity.
    """
    if cache.params_id != id(params) or cache.version != params.version:
        raise StaleCache("forward cache was computed for different or since-updated params")
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(len(params.layers) - 1, -1, -1):
        if i < len(params.layers) - 1:
            g = g * (cache.pre[i] > 0)
        dw = g.T @ cache.inputs[i]
        db = g.sum(axis=0)
        grads.append((dw, db))
        if i > 0:
            g = g @ cache.weights[i]
    grads.reverse()
    return ModelParams(grads)


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    r = np.asarray(pred, dtype=np.float64) - target
    return float(np.mean(r * r)), 2.0 * r / r.size


def huber(pred: np.ndarray, target: np.ndarray, delta: float = 1.0) -> tuple[float, np.ndarray]:
    r = np.asarray(pred, dtype=np.float64) - target
    a = np.abs(r)
    vals = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    grad = np.clip(r, -delta, delta) / r.size
    return float(np.mean(vals)), grad


def loss(pred, target, kind: str = "huber", delta: float = 1.0) -> tuple[float, np.ndarray]:
    if kind == "mse":
        return mse(pred, target)
    if kind == "huber":
        return huber(pred, target, delta)
    raise ValueError(f"unknown loss {kind!r}")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls([np.zeros_like(p) for p in params.tensors()], [np.zeros_like(p) for p in params.tensors()])


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float) -> ModelParams:
    """Bias-corrected Adam update, applied in place."""
    ps, gs = params.tensors(), grads.tensors()
    if len(ps) != len(state.m) or any(p.shape != m.shape for p, m in zip(ps, state.m)):
        raise ShapeMismatch("optimizer state does not match params")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.touch()
    return params
