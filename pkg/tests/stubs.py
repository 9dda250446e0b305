"""Closed-form stand-ins for the VAE and classifier."""
from __future__ import annotations

import numpy as np

from dive import tensor as T


class IdentityVAE:
    """encode_mean(x) = x and decode(z) = z; with ``prior`` the posterior is N(0, I)."""

    def __init__(self, d: int, prior: bool = False, recon_mode: str = "pixel"):
        self.d = d
        self.prior = prior
        self.meta = {"recon_mode": recon_mode}

    def _rows(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float).reshape(-1, self.d)

    def encode(self, x):
        mu = self._rows(x)
        if self.prior:
            mu = np.zeros_like(mu)
        return T.Tensor(mu), T.Tensor(np.zeros_like(mu))

    def encode_mean(self, x) -> np.ndarray:
        return self.encode(x)[0].data

    def decode(self, z):
        return T.as_tensor(z)


class LinearClassifier:
    """logit(x) = w . x + b."""

    def __init__(self, w, b: float = 0.0):
        self.w = np.asarray(w, dtype=float)
        self.b = b

    def logit(self, x):
        x = T.as_tensor(x)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        return x @ self.w + self.b

    def prob(self, x) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=float).reshape(-1, len(self.w))
        return 1.0 / (1.0 + np.exp(-(x @ self.w + self.b)))


class PixelOracle:
    """Reads its answers straight from designated pixels.

    pixel 0 > 0 -> label 1, pixel 1 > 0 -> style group 1 (style 4, else 0),
    pixel 2 > 0 -> shape 1, and the embedding is pixels 8..11.
    """

    def predict(self, x) -> dict:
        x = np.asarray(x, dtype=float).reshape(-1, 1024)
        style = np.where(x[:, 1] > 0, 4, 0)
        return {
            "label": (x[:, 0] > 0).astype(np.int64),
            "label_prob": (x[:, 0] > 0).astype(float),
            "shape": (x[:, 2] > 0).astype(np.int64),
            "style": style,
            "style_group": (style >= 4).astype(np.int64),
            "rotation": np.zeros(len(x), np.int64),
            "scale": np.zeros(len(x), np.int64),
            "embedding": self.embed_np(x),
        }

    def embed_np(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float).reshape(-1, 1024)[:, 8:12].copy()


class PixelClassifier:
    """f(x) = sigmoid(4 * pixel[3])."""

    def prob(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, 1024)
        return 1.0 / (1.0 + np.exp(-4.0 * x[:, 3]))
