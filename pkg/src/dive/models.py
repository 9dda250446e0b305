"""Generative model, classifiers and oracle: definitions, losses, training."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import Dataset, ROT_RANGE, SCALE_RANGE, style_group
from .nn import MLP, Model
from .optim import Adam, SeededRng

log = logging.getLogger(__name__)

PIXELS = 1024
EMBED_DIM = 64
LOG_2PI = math.log(2 * math.pi)
ORACLE_HEADS = {"label": 1, "shape": 16, "style": 8, "rotation": 3, "scale": 3}


class TrainingDiverged(RuntimeError):
    pass


def _as_batch(x) -> T.Tensor:
    x = T.as_tensor(x)
    return x.reshape(1, -1) if x.ndim == 1 or x.shape == (32, 32) else x.reshape(x.shape[0], -1)


class VAE(Model):
    kind = "vae"

    @classmethod
    def build(cls, latent_dim: int = 16, rng: SeededRng | None = None, **meta) -> "VAE":
        rng = rng or SeededRng(0)
        enc = MLP([PIXELS, 512, 256, 2 * latent_dim], ["swish", "swish", "identity"], rng.spawn("enc"))
        dec = MLP([latent_dim, 256, 512, PIXELS], ["swish", "swish", "tanh"], rng.spawn("dec"))
        return cls({"encoder": enc, "decoder": dec}, {"latent_dim": latent_dim, **meta})

    @property
    def latent_dim(self) -> int:
        return self.stacks["decoder"].sizes[0]

    def encode(self, x) -> tuple[T.Tensor, T.Tensor]:
        h = self.stacks["encoder"](_as_batch(x))
        d = self.latent_dim
        return h[:, :d], h[:, d:]

    def encode_mean(self, x) -> np.ndarray:
        with T.no_grad():
            return self.stacks["encoder"](_as_batch(x)).data[:, : self.latent_dim].copy()

    def decode(self, z) -> T.Tensor:
        return self.stacks["decoder"](z)


class Classifier(Model):
    kind = "classifier"

    @classmethod
    def build(cls, rng: SeededRng | None = None, **meta) -> "Classifier":
        net = MLP([PIXELS, 256, EMBED_DIM, 1], ["swish", "swish", "identity"], (rng or SeededRng(0)).spawn("clf"))
        return cls({"net": net}, meta)

    def logit(self, x) -> T.Tensor:
        return self.stacks["net"](_as_batch(x)).reshape(-1)

    def prob(self, x, chunk: int = 2048) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, T.Tensor) else x).reshape(-1, PIXELS)
        with T.no_grad():
            out = [self.stacks["net"](x[i:i + chunk]).data.reshape(-1) for i in range(0, len(x), chunk)]
        return T._sigmoid_np(np.concatenate(out))


class Oracle(Model):
    kind = "oracle"

    @classmethod
    def build(cls, rng: SeededRng | None = None, **meta) -> "Oracle":
        rng = rng or SeededRng(0)
        stacks = {"trunk": MLP([PIXELS, 256, EMBED_DIM], ["swish", "swish"], rng.spawn("trunk"))}
        for name, k in ORACLE_HEADS.items():
            stacks[f"head_{name}"] = MLP([EMBED_DIM, k], ["identity"], rng.spawn("head", name))
        return cls(stacks, meta)

    def embed(self, x) -> T.Tensor:
        return self.stacks["trunk"](_as_batch(x))

    def head_logits(self, emb: T.Tensor) -> dict[str, T.Tensor]:
        return {name: self.stacks[f"head_{name}"](emb) for name in ORACLE_HEADS}

    def embed_np(self, x, chunk: int = 2048) -> np.ndarray:
        x = np.asarray(x).reshape(-1, PIXELS)
        with T.no_grad():
            return np.concatenate([self.embed(x[i:i + chunk]).data for i in range(0, len(x), chunk)])

    def predict(self, x) -> dict[str, np.ndarray]:
        """Label, factor-head argmaxes, style group and embedding for a batch."""
        emb = self.embed_np(x)
        with T.no_grad():
            logits = self.head_logits(T.Tensor(emb))
        out = {name: np.argmax(l.data, axis=1) for name, l in logits.items() if name != "label"}
        out["label_prob"] = T._sigmoid_np(logits["label"].data.reshape(-1))
        out["label"] = (out["label_prob"] > 0.5).astype(np.int64)
        out["style_group"] = style_group(out["style"])
        out["embedding"] = emb
        return out


MODEL_KINDS = {"vae": VAE, "classifier": Classifier, "oracle": Oracle}


# -- losses ----------------------------------------------------------------
def reparameterize(mu, logvar, noise) -> T.Tensor:
    return T.as_tensor(mu) + T.exp(T.as_tensor(logvar) * 0.5) * T.as_tensor(noise)


def gaussian_kl(mu, logvar) -> np.ndarray:
    """Per-dimension KL(N(mu, exp(logvar)) || N(0, 1))."""
    mu, logvar = np.asarray(mu, float), np.asarray(logvar, float)
    return 0.5 * (mu ** 2 + np.exp(logvar) - 1.0 - logvar)


def _log_normal(z: T.Tensor, mu: T.Tensor, logvar: T.Tensor) -> T.Tensor:
    return ((z - mu) ** 2 * T.exp(-logvar) + logvar + LOG_2PI) * -0.5


def tcvae_kl_terms(z: T.Tensor, mu: T.Tensor, logvar: T.Tensor, dataset_size: int | None = None):
    """Index-code MI, total correlation and dimension-wise KL for one batch.

    The aggregate posterior q(z) and its marginals are estimated by minibatch
    weighted sampling: the sample's own posterior gets weight 1/N and every
    other batch member (N-1)/(N(M-1)), which is unbiased for q(z_i) when the
    batch is drawn from N training points.
    """
    m = z.shape[0]
    if m < 2:
        raise ValueError(f"tcvae terms need a batch of at least 2, got {m}")
    n = int(dataset_size or m)
    if n < m:
        raise ValueError(f"dataset_size {n} smaller than batch size {m}")
    logw = np.full((m, m), math.log((n - 1) / (n * (m - 1))))
    np.fill_diagonal(logw, -math.log(n))
    dens = T.mixture_log_density(z, mu, logvar, logw)
    log_qz, log_qz_prod = dens[:, 0], dens[:, 1]
    log_qzx = _log_normal(z, mu, logvar).sum(axis=1)
    log_pz = ((z ** 2 + LOG_2PI) * -0.5).sum(axis=1)
    mi = (log_qzx - log_qz).mean()
    tc = (log_qz - log_qz_prod).mean()
    dimkl = (log_qz_prod - log_pz).mean()
    return mi, tc, dimkl


def reconstruction_loss(x: T.Tensor, x_rec: T.Tensor, mode: str, oracle: Oracle | None = None,
                        perceptual_weight: float = 1.0) -> T.Tensor:
    """Unit-variance Gaussian negative log-likelihood (constants dropped).

    ``perceptual`` adds the same likelihood in the oracle's embedding space
    to the pixel term; the embedding alone leaves pixel detail unconstrained.
    """
    if mode not in ("pixel", "perceptual"):
        raise ValueError(f"unknown reconstruction mode {mode!r}")
    pixel = ((x - x_rec) ** 2).sum(axis=1).mean() * 0.5
    if mode == "pixel":
        return pixel
    if oracle is None:
        raise ValueError("perceptual reconstruction needs the oracle trunk")
    with T.no_grad():
        target = oracle.embed(x).data
    return pixel + ((oracle.embed(x_rec) - target) ** 2).sum(axis=1).mean() * (0.5 * perceptual_weight)


def tcvae_loss(x, vae: VAE, beta: float, recon_mode: str, noise: np.ndarray, oracle: Oracle | None = None,
               dataset_size: int | None = None, kl_weight: float = 1.0, recon_weight: float = 1.0,
               perceptual_weight: float = 1.0):
    """Returns (scalar loss, dict of float terms)."""
    x = _as_batch(x)
    if x.shape[0] < 2:
        raise ValueError(f"tcvae_loss needs a batch of at least 2, got {x.shape[0]}")
    mu, logvar = vae.encode(x)
    z = reparameterize(mu, logvar, noise)
    x_rec = vae.decode(z)
    mi, tc, dimkl = tcvae_kl_terms(z, mu, logvar, dataset_size)
    kl_side = mi + tc * beta + dimkl
    if recon_weight:
        recon = reconstruction_loss(x, x_rec, recon_mode, oracle, perceptual_weight)
        loss = recon * recon_weight + kl_side * kl_weight
    else:
        recon = T.Tensor(0.0)
        loss = kl_side * kl_weight
    terms = {"recon": recon.item(), "mi": mi.item(), "tc": tc.item(), "dimkl": dimkl.item(),
             "kl_analytic": float(gaussian_kl(mu.data, logvar.data).sum(axis=1).mean()),
             "total": loss.item()}
    return loss, terms


def cyclical_beta_schedule(step: int, total_steps: int, cycles: int) -> float:
    """Linear 0->1 ramp over the first half of each cycle, then hold at 1."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    period = total_steps / max(cycles, 1)
    frac = (step % period) / period
    return min(1.0, 2.0 * frac)


def bce_with_logits(logits: T.Tensor, targets: np.ndarray) -> T.Tensor:
    return (T.softplus(logits) - logits * targets).mean()


def cross_entropy(logits: T.Tensor, targets: np.ndarray) -> T.Tensor:
    n = logits.shape[0]
    lse = T.logsumexp(logits, axis=1)
    picked = logits[np.arange(n), targets]
    return (lse - picked).mean()


def rotation_bin(rot) -> np.ndarray:
    lo, hi = ROT_RANGE
    return np.digitize(rot, [lo + (hi - lo) / 3, lo + 2 * (hi - lo) / 3])


def scale_bin(scale) -> np.ndarray:
    lo, hi = SCALE_RANGE
    return np.digitize(scale, [lo + (hi - lo) / 3, lo + 2 * (hi - lo) / 3])


# -- training --------------------------------------------------------------
@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    beta: float = 2.0
    cycles: int = 4
    recon_mode: str = "perceptual"
    recon_weight: float = 1.0
    perceptual_weight: float = 1.0
    latent_dim: int = 16

    def validate(self, prefix: str = "") -> None:
        for name in ("epochs", "batch_size", "lr", "beta", "cycles", "latent_dim"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{prefix}{name}: must be positive")
        for name in ("recon_weight", "perceptual_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{prefix}{name}: must be non-negative")
        if self.recon_mode not in ("pixel", "perceptual"):
            raise ValueError(f"{prefix}recon_mode: expected 'pixel' or 'perceptual'")

    def to_dict(self) -> dict:
        return asdict(self)


def _batches(idx: np.ndarray, batch_size: int, rng: SeededRng):
    order = idx[rng.permutation(len(idx))]
    for i in range(0, len(order), batch_size):
        b = order[i:i + batch_size]
        if len(b) >= 2:
            yield b


def _check_finite(value: float, what: str, epoch: int, step: int, terms: dict) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"{what} diverged at epoch {epoch} step {step}: {terms}")


def train_vae(ds: Dataset, idx: np.ndarray, cfg: TrainConfig, rng: SeededRng,
              oracle: Oracle | None = None, **meta) -> tuple[VAE, list[tuple[int, str, float]]]:
    cfg.validate()
    vae = VAE.build(cfg.latent_dim, rng.spawn("init"), recon_mode=cfg.recon_mode, beta=cfg.beta, **meta)
    if cfg.recon_mode == "perceptual":
        if oracle is None:
            raise ValueError("perceptual reconstruction needs a trained oracle")
        oracle.freeze()
    opt = Adam(vae.params, lr=cfg.lr)
    steps_per_epoch = max(1, sum(1 for i in range(0, len(idx), cfg.batch_size) if len(idx[i:i + cfg.batch_size]) >= 2))
    total = cfg.epochs * steps_per_epoch
    step = 0
    rows: list[tuple[int, str, float]] = []
    for epoch in range(1, cfg.epochs + 1):
        erng = rng.spawn("epoch", epoch)
        sums: dict[str, float] = {}
        count = 0
        for b in _batches(idx, cfg.batch_size, erng):
            kl_w = cyclical_beta_schedule(min(step, total - 1), total, cfg.cycles)
            noise = erng.normal((len(b), cfg.latent_dim))
            opt.zero_grad()
            try:
                loss, terms = tcvae_loss(ds.images[b], vae, cfg.beta, cfg.recon_mode, noise, oracle,
                                         dataset_size=len(idx), kl_weight=kl_w, recon_weight=cfg.recon_weight,
                                         perceptual_weight=cfg.perceptual_weight)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"VAE diverged at epoch {epoch} step {step}: {exc}") from exc
            _check_finite(terms["total"], "VAE loss", epoch, step, terms)
            T.backward(loss)
            opt.step()
            step += 1
            count += 1
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
        for k in ("total", "recon", "mi", "tc", "dimkl", "kl_analytic"):
            rows.append((epoch, k, sums[k] / count))
        log.info("vae epoch %d total %.3f recon %.3f kl %.3f", epoch, sums["total"] / count,
                 sums["recon"] / count, sums["kl_analytic"] / count)
    vae.round_to_f32()
    return vae, rows


def reconstruct(vae: VAE, x: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return vae.decode(T.Tensor(vae.encode_mean(x))).data


def per_dim_kl(vae: VAE, x: np.ndarray) -> np.ndarray:
    with T.no_grad():
        mu, logvar = vae.encode(x)
    return gaussian_kl(mu.data, logvar.data).mean(axis=0)


def accuracy(clf: Classifier, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((clf.prob(x) > 0.5).astype(int) == y))


def train_classifier(ds: Dataset, idx: np.ndarray, cfg: TrainConfig, rng: SeededRng,
                     val_idx: np.ndarray | None = None, **meta) -> tuple[Classifier, list[tuple[int, str, float]]]:
    cfg.validate()
    clf = Classifier.build(rng.spawn("init"), **meta)
    opt = Adam(clf.params, lr=cfg.lr)
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        erng = rng.spawn("epoch", epoch)
        tot, count = 0.0, 0
        for b in _batches(idx, cfg.batch_size, erng):
            opt.zero_grad()
            loss = bce_with_logits(clf.logit(ds.images[b]), ds.labels[b].astype(float))
            _check_finite(loss.item(), "classifier loss", epoch, count, {"bce": loss.item()})
            T.backward(loss)
            opt.step()
            tot += loss.item()
            count += 1
        rows.append((epoch, "bce", tot / count))
    clf.round_to_f32()
    if val_idx is not None and len(val_idx):
        clf.meta["val_accuracy"] = accuracy(clf, ds.images[val_idx], ds.labels[val_idx])
        rows.append((cfg.epochs, "val_accuracy", clf.meta["val_accuracy"]))
    return clf, rows


def oracle_targets(ds: Dataset, idx: np.ndarray) -> dict[str, np.ndarray]:
    f = ds.factors[idx]
    return {
        "label": ds.labels[idx],
        "shape": f[:, 0].astype(np.int64),
        "style": f[:, 1].astype(np.int64),
        "rotation": rotation_bin(f[:, 2]),
        "scale": scale_bin(f[:, 3]),
    }


def oracle_accuracies(oracle: Oracle, ds: Dataset, idx: np.ndarray) -> dict[str, float]:
    pred = oracle.predict(ds.images[idx])
    tgt = oracle_targets(ds, idx)
    return {name: float(np.mean(pred[name] == tgt[name])) for name in ORACLE_HEADS}


def train_oracle(ds: Dataset, idx: np.ndarray, cfg: TrainConfig, rng: SeededRng,
                 val_idx: np.ndarray | None = None, **meta) -> tuple[Oracle, list[tuple[int, str, float]]]:
    cfg.validate()
    oracle = Oracle.build(rng.spawn("init"), **meta)
    opt = Adam(oracle.params, lr=cfg.lr)
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        erng = rng.spawn("epoch", epoch)
        tot, count = 0.0, 0
        for b in _batches(idx, cfg.batch_size, erng):
            tgt = oracle_targets(ds, b)
            opt.zero_grad()
            logits = oracle.head_logits(oracle.embed(ds.images[b]))
            loss = bce_with_logits(logits["label"].reshape(-1), tgt["label"].astype(float))
            for name in ("shape", "style", "rotation", "scale"):
                loss = loss + cross_entropy(logits[name], tgt[name])
            _check_finite(loss.item(), "oracle loss", epoch, count, {"loss": loss.item()})
            T.backward(loss)
            opt.step()
            tot += loss.item()
            count += 1
        rows.append((epoch, "loss", tot / count))
    oracle.round_to_f32()
    if val_idx is not None and len(val_idx):
        accs = oracle_accuracies(oracle, ds, val_idx)
        oracle.meta.update({f"val_accuracy_{k}": v for k, v in accs.items()})
        rows += [(cfg.epochs, f"val_accuracy_{k}", v) for k, v in accs.items()]
    return oracle, rows


def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "term", "value"])
        for epoch, term, value in rows:
            w.writerow([epoch, term, repr(float(value))])
