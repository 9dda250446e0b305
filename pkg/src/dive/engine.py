"""Latent-perturbation search for diverse counterfactual explanations.

Given a frozen VAE and classifier, ``generate_explanations`` optimises ``n``
perturbations of the posterior mean of an input so that each decoded image
reaches a target classifier output, while staying close to the input and
(for the unmasked methods) mutually dissimilar. The Fisher-based methods
restrict each perturbation to a subset of latent dimensions chosen from the
classifier's average Fisher information in latent space.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.interpolate import make_interp_spline

from . import tensor as T
from .data import check_header
from .optim import Adam, SeededRng

log = logging.getLogger(__name__)

METHODS = ("dive", "dive_minus", "xgem_plus", "random_masks", "fisher_chunks", "fisher_spectral")
MASK_METHODS = ("random_masks", "fisher_chunks", "fisher_spectral")
FISHER_METHODS = ("fisher_chunks", "fisher_spectral")
LOGIT_CLAMP = 30.0
FISHER_MAGIC = b"DIVF"
FISHER_VERSION = 1


@dataclass
class EngineConfig:
    method: str = "dive"
    n: int = 4
    lam: float = 0.0005
    alpha: float = 0.1
    gamma: float = 0.1
    lr: float = 0.1
    tau: int = 20
    delta: float = 0.05
    target: float | None = None
    chunk_semantics: str = "freeze"
    init_std: float = 0.01
    fisher_images: int = 256
    fisher_z: int = 32
    fisher_y_samples: int = 0   # 0: exact Bernoulli expectation over y

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method: {self.method!r} not one of {METHODS}")
        if not 1 <= self.n <= 15:
            raise ValueError(f"n: {self.n} outside [1, 15]")
        for name in ("lam", "alpha", "gamma", "lr", "delta", "init_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be non-negative")
        if self.tau < 1:
            raise ValueError("tau: must be at least 1")
        if self.target is not None and not 0.0 <= self.target <= 1.0:
            raise ValueError(f"target: {self.target} outside [0, 1]")
        if self.chunk_semantics not in ("freeze", "keep"):
            raise ValueError("chunk_semantics: expected 'freeze' or 'keep'")
        if self.fisher_images < 1 or self.fisher_z < 1 or self.fisher_y_samples < 0:
            raise ValueError("fisher budget: image and z counts must be positive")

    def normalized(self) -> "EngineConfig":
        """Apply method-implied settings (xGEM+ has no sparsity or diversity weight)."""
        self.validate()
        if self.method == "xgem_plus":
            return replace(self, alpha=0.0, gamma=0.0)
        return self

    @property
    def uses_masks(self) -> bool:
        return self.method in MASK_METHODS

    def to_dict(self) -> dict:
        return asdict(self)


# -- losses ----------------------------------------------------------------
def clamped_prob(logits: T.Tensor) -> T.Tensor:
    return T.sigmoid(T.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP))


def binary_cross_entropy(f: T.Tensor, y_hat: float) -> T.Tensor:
    """Elementwise ``-[y log f + (1 - y) log(1 - f)]``."""
    f = T.as_tensor(f)
    return -(T.log(f) * y_hat + T.log(1.0 - f) * (1.0 - y_hat))


def cf_terms(logits: T.Tensor, y_hat: float) -> T.Tensor:
    """Per-explanation BCE against ``y_hat``, evaluated in logit form for precision."""
    clamped = T.clip(T.as_tensor(logits), -LOGIT_CLAMP, LOGIT_CLAMP)
    return T.softplus(clamped) - clamped * y_hat


def prox_terms(x: np.ndarray, x_tilde: T.Tensor, eps: T.Tensor, gamma: float) -> T.Tensor:
    """Per-explanation ``||x - x~||_1 + gamma ||eps||_1`` (sums, not means)."""
    x_tilde = T.as_tensor(x_tilde)
    eps = T.as_tensor(eps)
    if x_tilde.ndim == 1:
        x_tilde = x_tilde.reshape(1, -1)
        eps = eps.reshape(1, -1)
    out = T.l1_norm(x_tilde - np.asarray(x).reshape(1, -1), axis=1)
    if gamma:
        out = out + T.l1_norm(eps, axis=1) * gamma
    return out


def loss_div(eps) -> T.Tensor:
    """sqrt of the summed squared cosine similarity over ordered pairs i != j."""
    eps = T.as_tensor(eps)
    n = eps.shape[0]
    if n < 2:
        return T.Tensor(0.0)
    unit = eps / (T.l2_norm(eps, axis=1, keepdims=True) + 1e-12)
    gram = unit @ unit.T
    off = gram * (1.0 - np.eye(n))
    return T.power((off * off).sum() + 1e-24, 0.5)


def _encode_decode(vae, x: np.ndarray, eps: T.Tensor):
    z = vae.encode_mean(np.asarray(x).reshape(1, -1))
    return vae.decode(T.as_tensor(eps) + z)


def loss_cf(x, y_hat: float, eps, vae, classifier) -> T.Tensor:
    eps = T.as_tensor(eps)
    eps2 = eps.reshape(1, -1) if eps.ndim == 1 else eps
    return cf_terms(classifier.logit(_encode_decode(vae, x, eps2)), y_hat).sum()


def loss_prox(x, eps, vae, gamma: float) -> T.Tensor:
    eps = T.as_tensor(eps)
    eps2 = eps.reshape(1, -1) if eps.ndim == 1 else eps
    return prox_terms(x, _encode_decode(vae, x, eps2), eps2, gamma).sum()


def loss_total(x, y_hat: float, eps, vae, classifier, config: EngineConfig):
    """Full objective and its decoded images; returns (loss, x_tilde, logits, terms)."""
    eps = T.as_tensor(eps)
    x_tilde = _encode_decode(vae, x, eps)
    return _objective(np.asarray(x).reshape(-1), x_tilde, classifier.logit(x_tilde), eps, y_hat, config)


def _objective(x, x_tilde, logits, eps, y_hat, config: EngineConfig):
    cf = cf_terms(logits, y_hat)
    prox = prox_terms(x, x_tilde, eps, config.gamma)
    loss = cf.sum()
    if config.lam:
        loss = loss + prox.sum() * config.lam
    div = T.Tensor(0.0)
    if not config.uses_masks and config.alpha:
        div = loss_div(eps)
        loss = loss + div * config.alpha
    terms = {"cf": cf.data.copy(), "prox": prox.data.copy(), "div": div.item(), "total": loss.item()}
    return loss, x_tilde, logits, terms


# -- Fisher information ----------------------------------------------------
@dataclass
class FisherEstimate:
    matrix: np.ndarray
    n_images: int
    n_z: int
    n_y: int = 0

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @property
    def diag(self) -> np.ndarray:
        return np.diag(self.matrix).copy()


def _grad_log_p(vae, classifier, z: np.ndarray, y: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row gradient of ln p(y|z) w.r.t. z plus p(y=1|z)."""
    zt = T.Tensor(z.copy(), requires_grad=True)
    logits = T.clip(classifier.logit(vae.decode(zt)), -LOGIT_CLAMP, LOGIT_CLAMP)
    # ln sigma(l) = -softplus(-l), ln(1 - sigma(l)) = -softplus(l)
    logp = -T.softplus(-logits) if y == 1 else -T.softplus(logits)
    p1 = T._sigmoid_np(logits.data)
    T.backward(logp.sum())
    g = zt.grad if zt.grad is not None else np.zeros_like(z)
    return g, p1


def estimate_fisher(vae, classifier, images: np.ndarray, budget: tuple[int, int, int] | EngineConfig,
                    rng: SeededRng, chunk: int = 512) -> FisherEstimate:
    """Monte-Carlo average of grad ln p(y|z) grad ln p(y|z)^T.

    Images are subsampled (without replacement) to the budget, ``n_z``
    latents are drawn from each image's posterior, and the expectation over
    ``y`` is exact unless ``n_y > 0``, in which case y is sampled.
    """
    if isinstance(budget, EngineConfig):
        budget = (budget.fisher_images, budget.fisher_z, budget.fisher_y_samples)
    n_images, n_z, n_y = budget
    images = np.asarray(images).reshape(len(images), -1)
    if len(images) == 0:
        raise ValueError("estimate_fisher needs at least one image")
    if len(images) > n_images:
        images = images[np.sort(rng.permutation(len(images))[:n_images])]
    with T.no_grad():
        mu, logvar = vae.encode(images)
    mu, std = mu.data, np.exp(0.5 * logvar.data)
    d = mu.shape[1]
    z_all = (mu[:, None, :] + std[:, None, :] * rng.normal((len(images), n_z, d))).reshape(-1, d)
    F = np.zeros((d, d))
    for i in range(0, len(z_all), chunk):
        z = z_all[i:i + chunk]
        g1, p = _grad_log_p(vae, classifier, z, 1)
        g0, _ = _grad_log_p(vae, classifier, z, 0)
        if n_y:
            ys = rng.random((len(z), n_y)) < p[:, None]
            w1, w0 = ys.mean(axis=1), 1.0 - ys.mean(axis=1)
        else:
            w1, w0 = p, 1.0 - p
        F += (g1 * w1[:, None]).T @ g1 + (g0 * w0[:, None]).T @ g0
    F /= len(z_all)
    F = 0.5 * (F + F.T)
    return FisherEstimate(F, len(images), n_z, n_y)


def save_fisher(est: FisherEstimate, path) -> None:
    """Cache layout: magic, u16 version, u32 d, u32 x3 sample counts, d*d <f8."""
    blob = FISHER_MAGIC + struct.pack("<HI3I", FISHER_VERSION, est.d, est.n_images, est.n_z, est.n_y)
    with open(path, "wb") as fh:
        fh.write(blob + np.ascontiguousarray(est.matrix, dtype="<f8").tobytes())


def load_fisher(path) -> FisherEstimate:
    with open(path, "rb") as fh:
        blob = fh.read()
    check_header(blob, FISHER_MAGIC, FISHER_VERSION, str(path))
    d, n_images, n_z, n_y = struct.unpack_from("<I3I", blob, 6)
    expected = 22 + 8 * d * d
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for d={d}, found {len(blob)}")
    matrix = np.frombuffer(blob, dtype="<f8", offset=22).reshape(d, d).astype(np.float64)
    return FisherEstimate(matrix, n_images, n_z, n_y)


# -- masks -----------------------------------------------------------------
def _fisher_matrix(F) -> np.ndarray:
    return F.matrix if isinstance(F, FisherEstimate) else np.asarray(F, dtype=float)


def fisher_order(F) -> np.ndarray:
    """Dimensions by descending Fisher diagonal; ties by ascending index."""
    return np.argsort(-np.diag(_fisher_matrix(F)), kind="stable")


def fisher_chunk_masks(F, n: int, semantics: str = "freeze") -> np.ndarray:
    """(n, d) 0/1 masks from contiguous chunks of the Fisher-sorted dimensions.

    ``freeze``: explanation i may move everything except chunk i. With
    ``n == 1`` the dimensions are split in two so that the single
    explanation freezes the most influential half.
    ``keep``: explanation i may move only chunk i.
    """
    M = _fisher_matrix(F)
    d = M.shape[0]
    if n > d:
        raise ValueError(f"cannot build {n} chunks over {d} dimensions")
    order = fisher_order(M)
    if semantics == "freeze":
        chunks = np.array_split(order, max(n, 2))
        masks = np.ones((n, d), dtype=np.int64)
        for i in range(n):
            masks[i, chunks[i]] = 0
    elif semantics == "keep":
        chunks = np.array_split(order, n)
        masks = np.zeros((n, d), dtype=np.int64)
        for i in range(n):
            masks[i, chunks[i]] = 1
    else:
        raise ValueError(f"unknown chunk semantics {semantics!r}")
    return masks


def random_masks(n: int, d: int, rng: SeededRng) -> np.ndarray:
    if n > d:
        raise ValueError(f"cannot build {n} masks over {d} dimensions")
    masks = np.zeros((n, d), dtype=np.int64)
    for i, part in enumerate(np.array_split(rng.permutation(d), n)):
        masks[i, part] = 1
    return masks


def _kmeans(X: np.ndarray, k: int, rng: SeededRng, max_iter: int = 100) -> np.ndarray:
    """Lloyd iterations from a farthest-point start; first centre drawn from ``rng``."""
    centers = [X[int(rng.integers(0, len(X)))]]
    for _ in range(1, k):
        dist = np.min([np.sum((X - c) ** 2, axis=1) for c in centers], axis=0)
        centers.append(X[int(np.argmax(dist))])
    C = np.array(centers)
    assign = np.full(len(X), -1)
    for _ in range(max_iter):
        dist = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(dist, axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = X[assign == j]
            if len(members):
                C[j] = members.mean(axis=0)
    return assign


def spectral_masks(F, n: int, rng: SeededRng, max_retries: int = 5) -> np.ndarray:
    """Partition latent dimensions by spectral clustering of |F| as affinity.

    Falls back to keep-chunk masks when the affinity is identically zero.
    Clusters are ordered by descending total Fisher diagonal.
    """
    M = _fisher_matrix(F)
    d = M.shape[0]
    if n > d:
        raise ValueError(f"cannot build {n} clusters over {d} dimensions")
    A = np.abs(M)
    np.fill_diagonal(A, 0.0)
    if not np.any(A > 0):
        return fisher_chunk_masks(M, n, "keep")
    deg = A.sum(axis=1)
    reg = 1e-12 * deg.max()
    inv_sqrt = 1.0 / np.sqrt(np.maximum(deg, reg))
    L = np.eye(d) - inv_sqrt[:, None] * A * inv_sqrt[None, :]
    _, vecs = np.linalg.eigh(0.5 * (L + L.T))
    U = vecs[:, :n]
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    U = np.where(norms > 1e-12, U / np.where(norms > 1e-12, norms, 1.0), 0.0)
    diag = np.diag(M)
    for attempt in range(max_retries + 1):
        assign = _kmeans(U, n, rng if attempt == 0 else rng.spawn("retry", attempt))
        sizes = np.bincount(assign, minlength=n)
        if np.all(sizes > 0):
            clusters = [np.flatnonzero(assign == j) for j in range(n)]
            clusters.sort(key=lambda c: (-diag[c].sum(), c.min()))
            masks = np.zeros((n, d), dtype=np.int64)
            for i, c in enumerate(clusters):
                masks[i, c] = 1
            return masks
        log.debug("spectral clustering produced an empty cluster (attempt %d)", attempt)
    raise RuntimeError(f"spectral clustering left a cluster empty after {max_retries} retries")


def build_masks(config: EngineConfig, d: int, rng: SeededRng, fisher: FisherEstimate | None) -> np.ndarray:
    if config.method == "random_masks":
        return random_masks(config.n, d, rng.spawn("masks"))
    if config.method in FISHER_METHODS:
        if fisher is None:
            raise ValueError(f"method {config.method} needs a Fisher estimate")
        if config.method == "fisher_chunks":
            return fisher_chunk_masks(fisher, config.n, config.chunk_semantics)
        return spectral_masks(fisher, config.n, rng.spawn("spectral"))
    return np.ones((config.n, d), dtype=np.int64)


# -- the optimisation loop -------------------------------------------------
@dataclass
class TrajectoryStep:
    step: int
    eps: np.ndarray          # (n, d)
    f: np.ndarray            # (n,)
    terms: dict


@dataclass
class PerturbationSet:
    eps: np.ndarray
    masks: np.ndarray
    trajectory: list[TrajectoryStep]
    valid: np.ndarray
    x_tilde: np.ndarray      # (n, 1024) decoded counterfactuals
    f_x: float
    target: float
    z: np.ndarray
    converged: bool
    method: str
    interpolated: dict = field(default_factory=dict)

    @property
    def f_final(self) -> np.ndarray:
        return self.trajectory[-1].f


def generate_explanations(x, classifier, vae, config: EngineConfig, rng: SeededRng,
                          fisher: FisherEstimate | None = None) -> PerturbationSet:
    cfg = config.normalized()
    if cfg.method == "dive_minus" and vae.meta.get("recon_mode", "pixel") != "pixel":
        raise ValueError("dive_minus expects a VAE trained with pixel reconstruction")
    x = np.asarray(x, dtype=float).reshape(-1)
    f_x = float(classifier.prob(x)[0])
    y_hat = cfg.target if cfg.target is not None else float(1 - round(f_x))
    z = vae.encode_mean(x)[0]
    d = len(z)
    masks = build_masks(cfg, d, rng, fisher)
    maskf = masks.astype(float)
    eps = T.Tensor(rng.spawn("init").normal((cfg.n, d), scale=cfg.init_std) * maskf, requires_grad=True)
    opt = Adam([eps], lr=cfg.lr)
    trajectory: list[TrajectoryStep] = []
    converged = False
    for step in range(cfg.tau + 1):
        opt.zero_grad()
        x_tilde = vae.decode(eps + z)
        logits = classifier.logit(x_tilde)
        loss, x_tilde, logits, terms = _objective(x, x_tilde, logits, eps, y_hat, cfg)
        f = T._sigmoid_np(np.clip(logits.data, -LOGIT_CLAMP, LOGIT_CLAMP))
        trajectory.append(TrajectoryStep(step, eps.data.copy(), f, terms))
        last_images = x_tilde.data
        if np.all(np.abs(f - y_hat) <= cfg.delta):
            converged = True
            break
        if step == cfg.tau:
            break
        T.backward(loss)
        eps.grad = eps.grad * maskf
        opt.step()
        eps.data *= maskf
    decision_x = f_x > 0.5
    valid = (trajectory[-1].f > 0.5) != decision_x
    return PerturbationSet(eps=eps.data.copy(), masks=masks, trajectory=trajectory, valid=valid,
                           x_tilde=last_images.copy(), f_x=f_x, target=y_hat, z=z, converged=converged,
                           method=cfg.method)


def interpolate_target(trajectory, y_query: float, explanation: int | None = None) -> np.ndarray:
    """Piecewise-quadratic interpolation of epsilon as a function of f.

    ``trajectory`` is either a list of :class:`TrajectoryStep` (then
    ``explanation`` selects the row) or a sequence of ``(eps, f)`` pairs.
    Knots are deduplicated on f (first occurrence wins) and sorted; queries
    outside the spanned range clamp to the nearest end.
    """
    pairs = []
    for item in trajectory:
        if isinstance(item, TrajectoryStep):
            i = 0 if explanation is None else explanation
            pairs.append((np.asarray(item.eps[i], float), float(item.f[i])))
        else:
            e, f = item
            pairs.append((np.atleast_1d(np.asarray(e, float)), float(f)))
    if not pairs:
        raise ValueError("empty trajectory")
    seen: dict[float, np.ndarray] = {}
    for e, f in pairs:
        if f not in seen:
            seen[f] = e
    fs = np.array(sorted(seen))
    es = np.stack([seen[f] for f in fs])
    if len(fs) == 1:
        return es[0].copy()
    q = float(np.clip(y_query, fs[0], fs[-1]))
    if q in seen:
        return seen[q].copy()
    if len(fs) == 2:
        w = (q - fs[0]) / (fs[1] - fs[0])
        return (1 - w) * es[0] + w * es[1]
    return make_interp_spline(fs, es, k=2, axis=0)(q)


def query_target(ps: PerturbationSet, vae, classifier, y_query: float) -> dict:
    """Interpolate every explanation to ``y_query`` and record what the classifier says there."""
    eps = np.stack([interpolate_target(ps.trajectory, y_query, i) for i in range(len(ps.eps))]) * ps.masks
    with T.no_grad():
        images = vae.decode(T.Tensor(ps.z + eps)).data
    out = {"eps": eps, "f": classifier.prob(images), "x_tilde": images}
    ps.interpolated[float(y_query)] = out
    return out
