"""Pipeline stages shared by the command line, the scripts and the acceptance suite.

Artifacts live under one output directory::

    data/unbiased_s{seed}.divd, data/biased_s{seed}.divd
    models/oracle.divc, models/vae.divc, models/vae_ood.divc     (shared, trained on shared_seed data)
    models/classifier_{biased,unbiased}_s{seed}.divc
    cache/fisher_{classifier}__{vae}.divf
    bundles/{classifier}/{method}/{index}/
    reports/, sweep/
"""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, row_key, row_seed
from .data import Dataset, load_dataset, sample_dataset, save_dataset, style_group
from .engine import (
    FISHER_METHODS, EngineConfig, FisherEstimate, PerturbationSet, estimate_fisher, generate_explanations,
    load_fisher, save_fisher,
)
from .metrics import (
    confounding_metric, ground_truth_bias, judge_batch, select_benchmark, sparsity, success_rate, validity_rate,
)
from .models import train_classifier, train_oracle, train_vae, write_log_csv
from .nn import load_checkpoint
from .optim import SeededRng

log = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    """A prerequisite file (dataset, checkpoint, bundle) is absent."""


# -- artifact layout -------------------------------------------------------
@dataclass(frozen=True)
class Layout:
    root: Path

    def dataset(self, kind: str, seed: int) -> Path:
        return self.root / "data" / f"{kind}_s{seed}.divd"

    def model(self, name: str) -> Path:
        return self.root / "models" / f"{name}.divc"

    def train_log(self, name: str) -> Path:
        return self.root / "models" / f"{name}_log.csv"

    def fisher(self, classifier: str, vae: str) -> Path:
        return self.root / "cache" / f"fisher_{classifier}__{vae}.divf"

    def bundles(self, classifier: str | None = None) -> Path:
        base = self.root / "bundles"
        return base / classifier if classifier else base

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def sweep(self) -> Path:
        return self.root / "sweep"


def classifier_name(kind: str, seed: int) -> str:
    return f"classifier_{kind}_s{seed}"


def require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def load_required(path: Path, what: str):
    return load_checkpoint(require(path, what))


def load_dataset_required(path: Path) -> Dataset:
    return load_dataset(require(path, "dataset"))


# -- data and training -----------------------------------------------------
def generate_datasets(cfg: ExperimentConfig, seed: int, layout: Layout) -> dict[str, Path]:
    out = {}
    for kind, rho in (("unbiased", cfg.unbiased_rho), ("biased", cfg.biased_rho)):
        path = layout.dataset(kind, seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        ds = sample_dataset(cfg.dataset_for(rho), SeededRng(seed).spawn("data", kind))
        save_dataset(ds, path)
        out[kind] = path
    return out


def train_stage(cfg: ExperimentConfig, kind: str, seed: int, layout: Layout, biased: bool = False,
                ood: bool = False, epochs: int | None = None) -> Path:
    """Train one model from on-disk data and write its checkpoint and log."""
    rng = SeededRng(seed).spawn("train", kind, "biased" if biased else "unbiased", "ood" if ood else "all")
    if kind == "classifier":
        group = "biased" if biased else "unbiased"
        ds = load_dataset_required(layout.dataset(group, seed))
        tc = cfg.classifier if epochs is None else replace(cfg.classifier, epochs=epochs)
        model, rows = train_classifier(ds, ds.train_idx, tc, rng, ds.val_idx, bias_strength=ds.config.bias_strength)
        name = classifier_name(group, seed)
    elif kind == "oracle":
        ds = load_dataset_required(layout.dataset("unbiased", seed))
        tc = cfg.oracle if epochs is None else replace(cfg.oracle, epochs=epochs)
        model, rows = train_oracle(ds, ds.train_idx, tc, rng, ds.val_idx)
        name = "oracle"
    elif kind == "vae":
        ds = load_dataset_required(layout.dataset("unbiased", seed))
        tc = cfg.vae if epochs is None else replace(cfg.vae, epochs=epochs)
        oracle = load_required(layout.model("oracle"), "oracle checkpoint") if tc.recon_mode == "perceptual" else None
        idx = ds.gen_train_idx if ood else ds.train_idx
        model, rows = train_vae(ds, idx, tc, rng, oracle, ood=ood)
        name = "vae_ood" if ood else "vae"
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    model.meta["seed"] = seed
    path = layout.model(name)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    write_log_csv(rows, layout.train_log(name))
    return path


def cached_fisher(vae, classifier, images: np.ndarray, engine: EngineConfig, seed: int, path: Path) -> FisherEstimate:
    budget = (engine.fisher_images, engine.fisher_z, engine.fisher_y_samples)
    if path.exists():
        est = load_fisher(path)
        if (est.n_images, est.n_z, est.n_y) == (min(budget[0], len(images)), budget[1], budget[2]):
            log.info("reusing cached Fisher matrix %s", path)
            return est
        log.info("cached Fisher matrix %s has a different budget; recomputing", path)
    est = estimate_fisher(vae, classifier, images, budget, SeededRng(seed).spawn("fisher"))
    path.parent.mkdir(parents=True, exist_ok=True)
    save_fisher(est, path)
    log.info("computed Fisher matrix and cached it at %s", path)
    return est


# -- explanation and scoring ----------------------------------------------
def explain_set(images: np.ndarray, classifier, vae, engine: EngineConfig, seed: int,
                fisher: FisherEstimate | None = None, key: str = "") -> list[PerturbationSet]:
    """Explain each image with an rng derived from (seed, key, position)."""
    base = SeededRng(seed).spawn("explain", key)
    return [generate_explanations(x, classifier, vae, engine, base.spawn(i), fisher=fisher)
            for i, x in enumerate(np.asarray(images).reshape(len(images), -1))]


@dataclass
class ScoreCard:
    n_inputs: int
    n_explanations: int
    validity: float
    any_valid: float
    success: float
    similarity: float
    sparsity: float
    points: list = field(default_factory=list)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in ("n_inputs", "n_explanations", "validity", "any_valid", "success",
                                              "similarity", "sparsity")}


def score_set(images: np.ndarray, psets: list[PerturbationSet], classifier, oracle) -> ScoreCard:
    judgments, any_valid = [], []
    for x, ps in zip(images, psets):
        judgments += judge_batch(x, ps.x_tilde, classifier, oracle)
        any_valid.append(bool(np.any(ps.valid)))
    rate, points = success_rate(judgments)
    return ScoreCard(len(psets), len(judgments), validity_rate(judgments), float(np.mean(any_valid)), rate,
                     float(np.mean([p[1] for p in points])), sparsity(judgments), points)


def valid_pairs(images: np.ndarray, psets: list[PerturbationSet]):
    xs, cfs, targets = [], [], []
    for x, ps in zip(images, psets):
        for i in np.flatnonzero(ps.valid):
            xs.append(x)
            cfs.append(ps.x_tilde[i])
            targets.append(int(ps.target > 0.5))
    return np.array(xs), np.array(cfs), np.array(targets)


# -- experiments -----------------------------------------------------------
@dataclass
class SharedModels:
    """Models trained once and reused by every seed of an experiment."""
    dataset: Dataset
    oracle: object
    vae: object
    vae_ood: object | None = None
    seconds: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)


def train_shared(cfg: ExperimentConfig, seed: int, ood: bool = True) -> SharedModels:
    timings, logs = {}, {}
    t = time.perf_counter()
    ds = sample_dataset(cfg.dataset_for(cfg.unbiased_rho), SeededRng(seed).spawn("data", "unbiased"))
    timings["dataset"] = time.perf_counter() - t
    t = time.perf_counter()
    oracle, logs["oracle"] = train_oracle(ds, ds.train_idx, cfg.oracle, SeededRng(seed).spawn("train", "oracle", "unbiased", "all"),
                             ds.val_idx)
    timings["oracle"] = time.perf_counter() - t
    t = time.perf_counter()
    vae, logs["vae"] = train_vae(ds, ds.train_idx, cfg.vae, SeededRng(seed).spawn("train", "vae", "unbiased", "all"), oracle)
    timings["vae"] = time.perf_counter() - t
    vae_ood = None
    if ood:
        t = time.perf_counter()
        vae_ood, logs["vae_ood"] = train_vae(ds, ds.gen_train_idx, cfg.vae, SeededRng(seed).spawn("train", "vae", "unbiased", "ood"),
                               oracle, ood=True)
        timings["vae_ood"] = time.perf_counter() - t
    return SharedModels(ds, oracle, vae, vae_ood, timings, logs)


def train_seed_classifiers(cfg: ExperimentConfig, seed: int) -> dict:
    out = {}
    for kind, rho in (("biased", cfg.biased_rho), ("unbiased", cfg.unbiased_rho)):
        ds = sample_dataset(cfg.dataset_for(rho), SeededRng(seed).spawn("data", kind))
        out[kind], _ = train_classifier(ds, ds.train_idx, cfg.classifier,
                                        SeededRng(seed).spawn("train", "classifier", kind, "all"), ds.val_idx,
                                        bias_strength=rho)
    return out


def bias_inputs(ds: Dataset, n: int, seed: int) -> np.ndarray:
    """A fixed random subset of the validation split, shared by both classifiers."""
    pick = SeededRng(seed).spawn("bias-inputs").permutation(len(ds.val_idx))[:n]
    return ds.val_idx[np.sort(pick)]


@dataclass
class BiasRow:
    seed: int
    classifier: str
    confounding: float
    ground_truth: float
    validity: float
    n_valid: int
    distribution: dict

    def row(self) -> dict:
        return {"seed": self.seed, "classifier": self.classifier, "confounding": self.confounding,
                "ground_truth": self.ground_truth, "validity": self.validity, "n_valid": self.n_valid}


def bias_experiment(shared: SharedModels, classifiers: dict, engine: EngineConfig, seed: int,
                    n_inputs: int = 64) -> list[BiasRow]:
    ds = shared.dataset
    idx = bias_inputs(ds, n_inputs, seed)
    images = ds.images[idx]
    val = ds.val_idx
    groups = style_group(ds.style_ids[val])
    rows = []
    for kind in ("biased", "unbiased"):
        clf = classifiers[kind]
        psets = explain_set(images, clf, shared.vae, engine, seed, key=f"bias-{kind}")
        xs, cfs, targets = valid_pairs(images, psets)
        rep = confounding_metric(xs, cfs, shared.oracle, targets) if len(xs) else None
        gt = ground_truth_bias(clf, ds.images[val], ds.labels[val], groups)
        validity = float(np.mean([v for ps in psets for v in ps.valid]))
        rows.append(BiasRow(seed, kind, rep.confounding if rep else float("nan"), gt, validity,
                            rep.n_valid if rep else 0, rep.distribution if rep else {}))
    return rows


def benchmark_indices(ds: Dataset, classifier, n_wrong: int = 2, shapes=None) -> np.ndarray:
    val = ds.val_idx
    sel = select_benchmark(classifier.prob(ds.images[val]), ds.labels[val], ds.shape_ids[val], shapes, n_wrong)
    return val[sel.indices]


def sweep_point(point: dict, seed: int, images: np.ndarray, classifier, vae, oracle, engine: EngineConfig,
                fisher: FisherEstimate | None) -> dict:
    key = row_key(point, seed)
    ecfg = replace(engine, **point).normalized()
    psets = explain_set(images, classifier, vae, ecfg, row_seed(seed, key), fisher=fisher)
    card = score_set(images, psets, classifier, oracle)
    return {"key": key, **{k: getattr(ecfg, k) for k in ("method", "gamma", "alpha", "lam", "n", "lr")},
            "seed": seed, **card.row()}


def method_means(rows: list[dict], metric: str = "success") -> dict[str, float]:
    by: dict[str, list[float]] = {}
    for r in rows:
        by.setdefault(r["method"], []).append(float(r[metric]))
    return {m: float(np.mean(v)) for m, v in by.items()}


def ood_experiment(shared: SharedModels, classifier, engine: EngineConfig, seed: int, methods,
                   n_wrong: int = 2) -> dict[str, ScoreCard]:
    """Explain in-distribution and held-out shapes with the VAE that never saw the held-out ones."""
    ds = shared.dataset
    held = set(ds.config.ood_shape_ids)
    shapes = {"in_distribution": sorted(set(range(16)) - held), "held_out": sorted(held)}
    fisher = None
    if any(m in FISHER_METHODS for m in methods):
        fisher = estimate_fisher(shared.vae_ood, classifier, ds.images[ds.gen_train_idx], engine,
                                 SeededRng(seed).spawn("fisher", "ood"))
    out = {}
    for split, shape_list in shapes.items():
        idx = benchmark_indices(ds, classifier, n_wrong, shape_list)
        psets = []
        for m in methods:
            psets += explain_set(ds.images[idx], classifier, shared.vae_ood, replace(engine, method=m), seed,
                                 fisher=fisher, key=f"ood-{split}-{m}")
        out[split] = score_set(np.concatenate([ds.images[idx]] * len(methods)), psets, classifier, shared.oracle)
    return out


# -- csv helpers -----------------------------------------------------------
def write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_rows(path: Path) -> list[dict]:
    if not path.exists() or path.stat().st_size == 0:
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def worker_count(requested: int | None = None) -> int:
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("DIVE_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)
