"""Bias detection, method ranking and held-out-shape experiments across seeds.

Trains the shared models once, a biased/unbiased classifier pair per seed,
then writes one CSV per experiment plus a short summary to ``--out``:

    python scripts/desk_experiments.py --out runs/desk --seeds 0 1 2 3 4
"""
import argparse
import logging
import time
from pathlib import Path

import numpy as np

from dive.config import ExperimentConfig, SweepGrid
from dive.engine import estimate_fisher
from dive.experiments import (
    benchmark_indices, bias_experiment, method_means, ood_experiment, sweep_point, train_seed_classifiers,
    train_shared, write_rows,
)
from dive.optim import SeededRng

log = logging.getLogger("desk")

RANKED = ("fisher_spectral", "fisher_chunks", "dive", "xgem_plus")
# a small slice of the full grid that fits a desk budget
DESK_GRID = SweepGrid(methods=RANKED, gamma=(0.0, 0.1), alpha=(0.1, 1.0), lam=(0.0005,), n=(4,), lr=(0.05, 0.1),
                      xgem_lr=(0.05, 0.1))


def run(cfg: ExperimentConfig, out: Path, grid: SweepGrid) -> str:
    out.mkdir(parents=True, exist_ok=True)
    t = time.perf_counter()
    shared = train_shared(cfg, cfg.seeds[0], ood=True)
    log.info("shared models trained in %.0fs", time.perf_counter() - t)
    bias, sweep, ood = [], [], []
    for seed in cfg.seeds:
        clfs = train_seed_classifiers(cfg, seed)
        bias += [r.row() for r in bias_experiment(shared, clfs, cfg.engine, seed)]
        clf = clfs["biased"]
        ds = shared.dataset
        images = ds.images[benchmark_indices(ds, clf, cfg.benchmark_wrong)]
        fisher = estimate_fisher(shared.vae, clf, ds.images[ds.train_idx], cfg.engine, SeededRng(seed).spawn("fisher"))
        sweep += [sweep_point(p, seed, images, clf, shared.vae, shared.oracle, cfg.engine, fisher)
                  for p in grid.points()]
        for split, card in ood_experiment(shared, clf, cfg.engine, seed, grid.methods, cfg.benchmark_wrong).items():
            ood.append({"seed": seed, "split": split, **card.row()})
        log.info("seed %d done (%.0fs elapsed)", seed, time.perf_counter() - t)
    write_rows(out / "bias.csv", bias)
    write_rows(out / "sweep.csv", sweep)
    write_rows(out / "ood.csv", ood)

    lines = ["bias detection (biased vs unbiased classifier)"]
    for seed in cfg.seeds:
        b, u = [next(r for r in bias if r["seed"] == seed and r["classifier"] == k) for k in ("biased", "unbiased")]
        lines.append(f"  seed {seed}: confounding {b['confounding']:.3f} vs {u['confounding']:.3f}, "
                     f"ground truth {b['ground_truth']:.3f} vs {u['ground_truth']:.3f}")
    means = method_means(sweep)
    lines.append("mean success rate by method")
    lines += [f"  {m:16s} {means[m]:.3f}" for m in grid.methods]
    for split in ("in_distribution", "held_out"):
        lines.append(f"success on {split} shapes: {np.mean([r['success'] for r in ood if r['split'] == split]):.3f}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    return text


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seeds", type=int, nargs="+")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seeds:
        cfg.seeds = tuple(args.seeds)
    print(run(cfg.validate(), Path(args.out), DESK_GRID), end="")
