"""Dense linear algebra helpers, initialization, AdamW, LoRA and a gradient oracle.

Matrices are plain numpy arrays. Training runs in float32; gradient checks
switch the whole parameter set to float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when array shapes do not compose."""


class NonFiniteError(FloatingPointError):
    """Raised when a value that must be finite is NaN or infinite."""


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; ``seed`` may be an int or a SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return root.spawn(n)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):  # reported below as NonFiniteError
        out = a @ b
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite product of {a.shape} and {b.shape}")
    return out


@dataclass
class LoraFactors:
    """Low-rank update ``A @ B`` for a ``d x k`` base weight."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A)
        self.B = np.asarray(self.B)
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise DimensionError(f"LoRA factors do not compose: A{self.A.shape}, B{self.B.shape}")
        d, r = self.A.shape
        k = self.B.shape[1]
        if r < 1 or r > min(d, k):
            raise DimensionError(f"rank {r} is not low-rank for a {d}x{k} weight")

    @property
    def rank(self) -> int:
        return self.A.shape[1]


def lora_adapt(w: np.ndarray, f: LoraFactors) -> np.ndarray:
    """Return ``W + A @ B`` without touching ``w``."""
    w = np.asarray(w)
    if w.shape != (f.A.shape[0], f.B.shape[1]):
        raise DimensionError(
            f"base weight {w.shape} incompatible with factors A{f.A.shape}, B{f.B.shape}"
        )
    return w + matmul(f.A, f.B)


def init_params(shape, scheme: str = "uniform_fan", seed=0, value: float = 0.0,
                dtype=TRAIN_DTYPE) -> np.ndarray:
    """Deterministic parameter initialization.

    ``uniform_fan`` draws from U(-a, a) with a = sqrt(6 / (fan_in + fan_out)),
    where fan_in is the first dimension and fan_out the last (1-D shapes use
    their length for both).
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if scheme == "zeros":
        return np.zeros(shape, dtype=dtype)
    if scheme == "constant":
        return np.full(shape, value, dtype=dtype)
    if scheme == "uniform_fan":
        fan_in, fan_out = shape[0], shape[-1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        out = make_rng(seed).uniform(-bound, bound, size=shape).astype(dtype)
        # float32 rounding may land a hair outside the bound
        return np.clip(out, -bound, bound).astype(dtype)
    raise ValueError(f"unknown init scheme {scheme!r}")


@dataclass
class AdamW:
    """Adam with decoupled weight decay and bias correction.

    ``step`` mutates the parameter arrays in place and advances ``t``.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             context: str = "") -> None:
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise DimensionError(f"{name}: grad {g.shape} vs param {params[name].shape}")
            if not np.all(np.isfinite(g)):
                where = f" ({context})" if context else ""
                raise NonFiniteError(f"non-finite gradient for {name}{where}")
        self.t += 1
        t = self.t
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p *= (1.0 - self.lr * self.weight_decay)
            p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= g.dtype.type(scale)
    return total


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=CHECK_DTYPE)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite around coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def rel_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=CHECK_DTYPE)
    g = np.asarray(numeric, dtype=CHECK_DTYPE)
    return np.abs(a - g) / np.maximum(np.maximum(np.abs(a), np.abs(g)), floor)
