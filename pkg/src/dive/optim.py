"""Adam optimizer and a portable seeded random stream."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

MASK64 = (1 << 64) - 1


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(cls, params: list[Tensor], lr: float, **kw) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    if len(state.m) != len(params):
        raise ValueError(f"state tracks {len(state.m)} parameters, got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} (shape {p.shape}) has no gradient")
        if state.m[i].shape != p.shape:
            raise ValueError(f"moment shape {state.m[i].shape} does not match parameter {p.shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        p.data -= (state.lr / bc1) * m / denom


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.create(self.params, lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)


class SeededRng:
    """PCG64-backed generator; identical seeds give identical streams.

    ``spawn(*keys)`` derives an independent child stream from a hash of the
    parent seed and the keys, so results do not depend on call order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, *keys) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, *keys))

    def normal(self, size=None, scale: float = 1.0, loc: float = 0.0) -> np.ndarray:
        return self.gen.normal(loc, scale, size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def random(self, size=None) -> np.ndarray:
        return self.gen.random(size)


def derive_seed(seed: int, *keys) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for k in keys:
        h.update(b"\x1f")
        h.update(str(k).encode())
    return int.from_bytes(h.digest(), "little")
