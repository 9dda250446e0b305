"""Procedural 32x32 glyph images with known generative factors.

Sixteen glyph templates are rasterised from signed-distance functions with
eight stroke/fill styles. The label is glyph-set membership
(``shape_id < 8``); the style is the nuisance factor whose correlation with
the label is controlled by ``bias_strength``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .optim import SeededRng

IMG = 32
N_SHAPES = 16
N_STYLES = 8
ROT_RANGE = (-25.0, 25.0)
SCALE_RANGE = (0.6, 1.0)
SHIFT_RANGE = (-3.0, 3.0)
BASE_RADIUS = 10.0

DATASET_MAGIC = b"DIVD"
DATASET_VERSION = 1

_RECORD = np.dtype([("image", "<f4", (IMG * IMG,)), ("factors", "<f4", (6,)), ("label", "u1")])


@dataclass(frozen=True)
class FactorVector:
    shape_id: int
    style_id: int
    rotation: float = 0.0
    scale: float = 1.0
    dx: float = 0.0
    dy: float = 0.0

    def validate(self) -> None:
        if not 0 <= self.shape_id < N_SHAPES:
            raise ValueError(f"shape_id {self.shape_id} outside [0, {N_SHAPES - 1}]")
        if not 0 <= self.style_id < N_STYLES:
            raise ValueError(f"style_id {self.style_id} outside [0, {N_STYLES - 1}]")
        for name, (lo, hi) in (("rotation", ROT_RANGE), ("scale", SCALE_RANGE),
                               ("dx", SHIFT_RANGE), ("dy", SHIFT_RANGE)):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")

    def as_array(self) -> np.ndarray:
        return np.array([self.shape_id, self.style_id, self.rotation, self.scale, self.dx, self.dy])

    @classmethod
    def from_array(cls, a) -> "FactorVector":
        return cls(int(round(a[0])), int(round(a[1])), float(a[2]), float(a[3]), float(a[4]), float(a[5]))


def label_of(shape_id) -> np.ndarray | int:
    return (np.asarray(shape_id) < N_SHAPES // 2).astype(np.int64) if np.ndim(shape_id) else int(shape_id < N_SHAPES // 2)


def style_group(style_id):
    """Binary nuisance partition: styles 0-3 vs 4-7."""
    return (np.asarray(style_id) >= N_STYLES // 2).astype(np.int64)


# -- glyph geometry (glyph units: pixels at scale 1, y pointing down) ------
def _regular(n: int, r: float, phase: float = -np.pi / 2) -> np.ndarray:
    a = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def _rect(x0, y0, x1, y1) -> np.ndarray:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def _polygon_sdf(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Exact signed distance to a simple polygon (negative inside)."""
    d = np.full(px.shape, np.inf)
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        wx, wy = px - ax, py - ay
        t = np.clip((wx * ex + wy * ey) / (ex * ex + ey * ey), 0.0, 1.0)
        qx, qy = wx - ex * t, wy - ey * t
        d = np.minimum(d, qx * qx + qy * qy)
        cond = (ay <= py) != (by <= py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = ax + (py - ay) * ex / np.where(ey == 0, 1.0, ey)
        inside ^= cond & (px < xint)
    return np.where(inside, -1.0, 1.0) * np.sqrt(d)


def _disc_sdf(px, py, r, cx=0.0, cy=0.0):
    return np.hypot(px - cx, py - cy) - r


def _union(*ds):
    return np.minimum.reduce(ds)


def _glyph_sdf(shape_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    P = _polygon_sdf
    if shape_id == 0:
        return _disc_sdf(u, v, BASE_RADIUS)
    if shape_id == 1:  # downward triangle
        return P(u, v, _regular(3, 10.5, np.pi / 2) - [0, 1.5])
    if shape_id == 2:
        return P(u, v, _regular(3, 10.5) + [0, 1.5])
    if shape_id == 3:
        return _union(P(u, v, _rect(-10, -3, 10, 3)), P(u, v, _rect(-3, -10, 3, 10)))
    if shape_id == 4:  # hourglass
        return P(u, v, np.array([[-9, -10], [9, -10], [1.5, 0], [9, 10], [-9, 10], [-1.5, 0]], float))
    if shape_id == 5:  # U
        return P(u, v, np.array([[-9, -10], [-3, -10], [-3, 4], [3, 4], [3, -10], [9, -10], [9, 10], [-9, 10]], float))
    if shape_id == 6:
        d = np.hypot(u, v)
        return np.maximum(d - 10.0, 5.0 - d)
    if shape_id == 7:
        return P(u, v, _rect(-10, -4, 10, 4))
    if shape_id == 8:  # H
        return _union(P(u, v, _rect(-10, -10, -4, 10)), P(u, v, _rect(4, -10, 10, 10)), P(u, v, _rect(-4, -3, 4, 3)))
    if shape_id == 9:  # Z
        return P(u, v, np.array([[-9, -10], [9, -10], [9, -5], [-1, 5], [9, 5], [9, 10], [-9, 10], [-9, 5],
                                 [1, -5], [-9, -5]], float))
    if shape_id == 10:
        return P(u, v, np.array([[-8, -10], [-2, -10], [-2, 4], [8, 4], [8, 10], [-8, 10]], float))
    if shape_id == 11:
        return _union(P(u, v, _rect(-10, -10, 10, -4)), P(u, v, _rect(-3, -10, 3, 10)))
    if shape_id == 12:  # three dots
        return _union(_disc_sdf(u, v, 4.0, 0.0, -6.0), _disc_sdf(u, v, 4.0, -6.0, 5.0), _disc_sdf(u, v, 4.0, 6.0, 5.0))
    if shape_id == 13:
        return P(u, v, np.array([[0, -10], [9, 0], [3, 0], [3, 10], [-3, 10], [-3, 0], [-9, 0]], float))
    if shape_id == 14:
        return np.maximum(_disc_sdf(u, v, 11.0, 0.0, 4.0), v - 4.0)
    if shape_id == 15:
        return np.maximum(_disc_sdf(u, v, 10.0), -_disc_sdf(u, v, 8.0, 5.0, -2.0))
    raise ValueError(f"unknown shape_id {shape_id}")


def _coverage(s: np.ndarray) -> np.ndarray:
    return np.clip(0.5 - s, 0.0, 1.0)


def _stripes(t: np.ndarray, period: float = 4.0) -> np.ndarray:
    return np.clip(0.5 + 1.2 * np.cos(2 * np.pi * t / period), 0.0, 1.0)


def _style_intensity(style_id: int, s: np.ndarray, u: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    if style_id == 0:
        return _coverage(s)
    if style_id == 1:
        return _coverage(np.abs(s) - 0.75)
    if style_id == 2:
        return _coverage(np.abs(s) - 1.75)
    if style_id == 3:
        return _coverage(s) * _stripes(v)
    if style_id == 4:
        return _coverage(s) * _stripes(u)
    if style_id == 5:
        dots = np.clip(0.5 + 1.2 * np.cos(2 * np.pi * u / 4.0) * np.cos(2 * np.pi * v / 4.0), 0.0, 1.0)
        return _coverage(s) * dots
    if style_id == 6:
        return np.maximum(_coverage(np.abs(s) - 1.0), 0.5 * _coverage(s))
    if style_id == 7:
        return 0.55 * _coverage(s)
    raise ValueError(f"unknown style_id {style_id}")


_YY, _XX = np.mgrid[0:IMG, 0:IMG].astype(float)
_CENTER = (IMG - 1) / 2.0


def render(factors: FactorVector) -> np.ndarray:
    """Rasterise ``factors`` to a (32, 32) float64 image in [-1, 1]."""
    factors.validate()
    th = np.deg2rad(factors.rotation)
    c, s = np.cos(th), np.sin(th)
    x = _XX - _CENTER - factors.dx
    y = _YY - _CENTER - factors.dy
    # inverse rotation then inverse scale into glyph units
    u = (c * x + s * y) / factors.scale
    v = (-s * x + c * y) / factors.scale
    sdf = _glyph_sdf(factors.shape_id, u, v) * factors.scale
    inten = _style_intensity(factors.style_id, sdf, u, v, factors.scale)
    return 2.0 * inten - 1.0


def render_batch(factor_rows: np.ndarray) -> np.ndarray:
    return np.stack([render(FactorVector.from_array(r)).reshape(-1) for r in factor_rows])


# -- dataset sampling ------------------------------------------------------
def _default_styles() -> dict[int, tuple[int, ...]]:
    return {1: (0, 1, 2, 3), 0: (4, 5, 6, 7)}


@dataclass
class DatasetConfig:
    n_samples: int = 20000
    bias_strength: float = 0.0
    style_assignment: dict[int, tuple[int, ...]] = field(default_factory=_default_styles)
    split_seed: int = 0
    ood_shape_ids: tuple[int, ...] = (4, 5, 6, 7, 12, 13, 14, 15)
    val_fraction: float = 0.1

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples: must be positive")
        if not 0.0 <= self.bias_strength <= 1.0:
            raise ValueError(f"bias_strength: {self.bias_strength} outside [0, 1]")
        ood = set(self.ood_shape_ids)
        if not ood or not ood < set(range(N_SHAPES)):
            raise ValueError("ood_shape_ids: must be a non-empty proper subset of shape ids 0..15")
        for lab in (0, 1):
            styles = self.style_assignment.get(lab)
            if not styles or not set(styles) <= set(range(N_STYLES)):
                raise ValueError(f"style_assignment: label {lab} needs a non-empty subset of styles 0..7")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction: must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["style_assignment"] = {str(k): list(v) for k, v in sorted(self.style_assignment.items())}
        d["ood_shape_ids"] = list(self.ood_shape_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        d["style_assignment"] = {int(k): tuple(int(s) for s in v) for k, v in d["style_assignment"].items()}
        d["ood_shape_ids"] = tuple(int(s) for s in d["ood_shape_ids"])
        return cls(**d)


@dataclass
class Dataset:
    images: np.ndarray          # (N, 1024) float64 in [-1, 1]
    factors: np.ndarray         # (N, 6): shape, style, rotation, scale, dx, dy
    labels: np.ndarray          # (N,) int
    train_idx: np.ndarray
    val_idx: np.ndarray
    gen_train_idx: np.ndarray   # train_idx minus held-out shapes
    config: DatasetConfig
    seed: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape_ids(self) -> np.ndarray:
        return self.factors[:, 0].astype(np.int64)

    @property
    def style_ids(self) -> np.ndarray:
        return self.factors[:, 1].astype(np.int64)

    def record(self, i: int) -> tuple[np.ndarray, FactorVector, int]:
        return self.images[i].reshape(IMG, IMG), FactorVector.from_array(self.factors[i]), int(self.labels[i])

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "n_records": len(self),
            "train_idx": self.train_idx.tolist(),
            "val_idx": self.val_idx.tolist(),
            "gen_train_idx": self.gen_train_idx.tolist(),
        }


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def sample_factors(config: DatasetConfig, rng: SeededRng) -> np.ndarray:
    n = config.n_samples
    shape = rng.integers(0, N_SHAPES, n)
    labels = label_of(shape)
    uniform_style = rng.integers(0, N_STYLES, n)
    use_pref = rng.random(n) < config.bias_strength
    pick = rng.random(n)
    style = uniform_style.copy()
    for lab in (0, 1):
        pref = np.asarray(config.style_assignment[lab])
        sel = use_pref & (labels == lab)
        style[sel] = pref[np.minimum((pick[sel] * len(pref)).astype(int), len(pref) - 1)]
    # factors are stored as float32 on disk; keep them representable so that
    # re-rendering loaded factors reproduces the in-memory images exactly
    rot = _f32(rng.uniform(*ROT_RANGE, n))
    scale = _f32(rng.uniform(*SCALE_RANGE, n))
    dx = _f32(rng.uniform(*SHIFT_RANGE, n))
    dy = _f32(rng.uniform(*SHIFT_RANGE, n))
    rot, scale = np.clip(rot, *ROT_RANGE), np.clip(scale, *SCALE_RANGE)
    dx, dy = np.clip(dx, *SHIFT_RANGE), np.clip(dy, *SHIFT_RANGE)
    return np.stack([shape, style, rot, scale, dx, dy], axis=1).astype(np.float64)


def sample_dataset(config: DatasetConfig, rng: SeededRng | int) -> Dataset:
    config.validate()
    if not isinstance(rng, SeededRng):
        rng = SeededRng(rng)
    factors = sample_factors(config, rng)
    images = render_batch(factors)
    labels = label_of(factors[:, 0].astype(np.int64))
    perm = SeededRng(config.split_seed).spawn("split", config.n_samples).permutation(config.n_samples)
    n_val = max(1, int(round(config.val_fraction * config.n_samples)))
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    ood = np.isin(factors[train_idx, 0].astype(np.int64), list(config.ood_shape_ids))
    return Dataset(images, factors, labels, train_idx, val_idx, train_idx[~ood], config, seed=rng.seed)


# -- persistence -----------------------------------------------------------
def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def save_dataset(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    recs = np.zeros(len(ds), dtype=_RECORD)
    recs["image"] = ds.images.astype(np.float32)
    recs["factors"] = ds.factors.astype(np.float32)
    recs["label"] = ds.labels.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC + struct.pack("<HI", DATASET_VERSION, len(ds)))
        fh.write(recs.tobytes())
    manifest_path(path).write_text(json.dumps(ds.manifest(), sort_keys=True, indent=1) + "\n")


def check_header(blob: bytes, magic: bytes, version: int, what: str) -> None:
    if blob[:4] != magic:
        raise ValueError(f"{what}: bad magic {blob[:4]!r}, expected {magic!r}")
    (found,) = struct.unpack_from("<H", blob, 4)
    if found != version:
        raise ValueError(f"{what}: file version {found} not supported (this build reads version {version})")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    blob = path.read_bytes()
    check_header(blob, DATASET_MAGIC, DATASET_VERSION, str(path))
    (count,) = struct.unpack_from("<I", blob, 6)
    recs = np.frombuffer(blob, dtype=_RECORD, count=count, offset=10)
    man = json.loads(manifest_path(path).read_text())
    cfg = DatasetConfig.from_dict(man["config"])
    return Dataset(
        images=recs["image"].astype(np.float64),
        factors=recs["factors"].astype(np.float64),
        labels=recs["label"].astype(np.int64),
        train_idx=np.asarray(man["train_idx"], dtype=np.int64),
        val_idx=np.asarray(man["val_idx"], dtype=np.int64),
        gen_train_idx=np.asarray(man["gen_train_idx"], dtype=np.int64),
        config=cfg,
        seed=int(man["seed"]),
    )


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information (nats) between two discrete arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    joint = np.zeros((len(ua), len(ub)))
    np.add.at(joint, (ia, ib), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))
