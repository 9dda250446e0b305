"""``dive`` command line: gen-data, train, explain, evaluate, sweep, report.

Exit codes: 0 success, 1 internal error, 2 configuration error,
3 missing prerequisite artifact.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import sys
import warnings
from dataclasses import replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import experiments as X
from .bundle import list_bundles, read_bundle, write_bundle
from .config import ConfigError, ExperimentConfig, row_key
from .data import style_group
from .engine import FISHER_METHODS, METHODS, generate_explanations, query_target
from .metrics import (
    confounding_metric, frechet_by_category, ground_truth_bias, identity_metrics, judge_batch, sparsity,
    success_rate, validity_rate,
)
from .optim import SeededRng

log = logging.getLogger("dive")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3


# -- config plumbing -------------------------------------------------------
def apply_overrides(cfg: ExperimentConfig, assignments: list[str]) -> ExperimentConfig:
    """Apply ``section.key=json`` assignments through the normal parser."""
    if not assignments:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(cfg.dumps())
    for item in assignments:
        target, sep, value = item.partition("=")
        section, dot, key = target.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set {item!r}: expected section.key=value")
        if not parser.has_section(section):
            raise ConfigError(f"{section}: unknown section")
        parser[section][key] = value
    buf = io.StringIO()
    parser.write(buf)
    return ExperimentConfig.loads(buf.getvalue())


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = apply_overrides(cfg, args.set or [])
    cfg.validate()
    return cfg


def _context(args):
    cfg = load_config(args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    layout = X.Layout(Path(args.out or cfg.out_dir))
    return cfg, seed, layout


def _shared_seed(cfg: ExperimentConfig) -> int:
    return cfg.seeds[0]


# -- commands --------------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg, seed, layout = _context(args)
    for kind, path in X.generate_datasets(cfg, seed, layout).items():
        print(f"{kind}: {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, seed, layout = _context(args)
    path = X.train_stage(cfg, args.model, seed, layout, biased=args.biased, ood=args.ood, epochs=args.epochs)
    print(path)
    return EXIT_OK


def _explain_models(cfg, seed, layout, classifier_kind: str, ood: bool):
    shared = _shared_seed(cfg)
    ds = X.load_dataset_required(layout.dataset("unbiased", shared))
    clf_name = X.classifier_name(classifier_kind, seed)
    clf = X.load_required(layout.model(clf_name), "classifier checkpoint")
    vae_name = "vae_ood" if ood else "vae"
    vae = X.load_required(layout.model(vae_name), "VAE checkpoint")
    return ds, clf, clf_name, vae, vae_name


def cmd_explain(args) -> int:
    cfg, seed, layout = _context(args)
    engine = cfg.engine
    if args.method:
        engine = replace(engine, method=args.method)
    engine = engine.normalized()
    ds, clf, clf_name, vae, vae_name = _explain_models(cfg, seed, layout, args.classifier, args.ood)
    if args.index:
        bad = [i for i in args.index if not 0 <= i < len(ds)]
        if bad:
            raise ConfigError(f"--index: {bad[0]} outside [0, {len(ds)})")
        indices = np.array(args.index, dtype=np.int64)
    else:
        indices = X.benchmark_indices(ds, clf, cfg.benchmark_wrong)
    fisher = None
    if engine.method in FISHER_METHODS:
        pool = ds.gen_train_idx if args.ood else ds.train_idx
        fisher = X.cached_fisher(vae, clf, ds.images[pool], engine, seed, layout.fisher(clf_name, vae_name))
    root = layout.bundles(clf_name) / engine.method
    for i in indices:
        rng = SeededRng(seed).spawn("explain", clf_name, vae_name, engine.method, int(i))
        ps = generate_explanations(ds.images[i], clf, vae, engine, rng, fisher=fisher)
        if args.target is not None:
            query_target(ps, vae, clf, args.target)
        info = {"index": int(i), "seed": seed, "classifier": clf_name, "vae": vae_name,
                "label": int(ds.labels[i]), "shape": int(ds.shape_ids[i]), "engine": engine.to_dict()}
        out = write_bundle(root / f"{int(i):05d}", ds.images[i], ps, info)
        log.info("wrote %s (valid %s)", out, ps.valid.tolist())
    print(f"{len(indices)} bundle(s) under {root}")
    return EXIT_OK


def _evaluate_group(bundles, oracle, clf, ds) -> dict[str, float]:
    originals, cfs, judgments, targets, valid, f_cf = [], [], [], [], [], []
    for b in bundles:
        x = b["original"]
        js = judge_batch(x, b["x_tilde"], clf, oracle)
        judgments += js
        originals += [x] * len(js)
        cfs += list(b["x_tilde"])
        targets += [int(b["summary"]["target"] > 0.5)] * len(js)
        valid += [j.valid for j in js]
        f_cf += list(clf.prob(b["x_tilde"]))
    originals, cfs = np.array(originals), np.array(cfs)
    rate, _ = success_rate(judgments)
    out = {
        "n_inputs": float(len(bundles)),
        "n_explanations": float(len(judgments)),
        "validity": validity_rate(judgments),
        "success_rate": rate,
        "similarity": float(np.mean([1.0 - j.proximity for j in judgments])),
        "sparsity": sparsity(judgments),
    }
    if any(valid):
        out["confounding"] = confounding_metric(originals, cfs, oracle, targets, valid).confounding
    if ds is not None:
        val = ds.val_idx
        out["ground_truth_bias"] = ground_truth_bias(clf, ds.images[val], ds.labels[val], style_group(ds.style_ids[val]))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fr = frechet_by_category(ds.images[val], clf.prob(ds.images[val]), cfs, f_cf, oracle)
        out.update({f"frechet_{k}": v for k, v in fr.items()})
    if len(cfs) >= 2:
        closeness, verification = identity_metrics(originals, cfs, oracle)
        out["latent_closeness"], out["verification_accuracy"] = closeness, verification
    return out


def cmd_evaluate(args) -> int:
    cfg, _, layout = _context(args)
    root = Path(args.bundles) if args.bundles else layout.bundles()
    paths = list_bundles(root) if root.exists() else []
    if not paths:
        raise X.MissingArtifact(f"no explanation bundles under {root}")
    oracle = X.load_required(layout.model("oracle"), "oracle checkpoint")
    ds_path = layout.dataset("unbiased", _shared_seed(cfg))
    ds = X.load_dataset(ds_path) if ds_path.exists() else None
    groups: dict[tuple, list] = {}
    for p in paths:
        b = read_bundle(p)
        s = b["summary"]
        groups.setdefault((s["classifier"], s["method"], s["seed"]), []).append(b)
    rows, scatter = [], []
    for (clf_name, method, s), bundles in sorted(groups.items()):
        clf = X.load_required(layout.model(clf_name), "classifier checkpoint")
        metrics = _evaluate_group(bundles, oracle, clf, ds)
        rows += [{"classifier": clf_name, "method": method, "seed": s, "metric": k, "value": v}
                 for k, v in metrics.items()]
        for b in bundles:
            for j in judge_batch(b["original"], b["x_tilde"], clf, oracle):
                scatter.append({"classifier": clf_name, "method": method, "seed": s, "index": b["summary"]["index"],
                                "success": int(j.success), "similarity": 1.0 - j.proximity})
    out = Path(args.report_dir) if args.report_dir else layout.reports
    X.write_rows(out / "metrics.csv", rows)
    X.write_rows(out / "scatter.csv", scatter)
    (out / "metrics.txt").write_text(metrics_table(rows))
    print(metrics_table(rows), end="")
    return EXIT_OK


def metrics_table(rows: list[dict]) -> str:
    """Methods as rows, metrics as columns, one block per classifier and seed."""
    blocks: dict[tuple, dict] = {}
    for r in rows:
        blocks.setdefault((r["classifier"], str(r["seed"])), {}).setdefault(r["method"], {})[r["metric"]] = float(r["value"])
    lines = []
    for (clf, seed), by_method in sorted(blocks.items()):
        metrics = sorted({m for v in by_method.values() for m in v})
        lines.append(f"# {clf} seed {seed}")
        lines.append("method".ljust(16) + "".join(m[:14].rjust(15) for m in metrics))
        for method, vals in sorted(by_method.items()):
            lines.append(method.ljust(16) + "".join(f"{vals.get(m, float('nan')):15.4f}" for m in metrics))
        lines.append("")
    return "\n".join(lines)


# sweep workers keep one loaded context per (out dir, seed)
_SWEEP_CACHE: dict = {}


def _sweep_context(cfg_text: str, root: str, seed: int):
    key = (root, seed)
    if key not in _SWEEP_CACHE:
        cfg = ExperimentConfig.loads(cfg_text)
        layout = X.Layout(Path(root))
        ds, clf, clf_name, vae, vae_name = _explain_models(cfg, seed, layout, "biased", False)
        idx = X.benchmark_indices(ds, clf, cfg.benchmark_wrong)
        fisher = None
        if any(m in FISHER_METHODS for m in cfg.sweep.methods):
            fisher = X.cached_fisher(vae, clf, ds.images[ds.train_idx], cfg.engine, seed,
                                     layout.fisher(clf_name, vae_name))
        oracle = X.load_required(layout.model("oracle"), "oracle checkpoint")
        _SWEEP_CACHE[key] = (cfg, ds.images[idx], clf, vae, oracle, fisher)
    return _SWEEP_CACHE[key]


def _sweep_task(task):
    cfg_text, root, point, seed = task
    cfg, images, clf, vae, oracle, fisher = _sweep_context(cfg_text, root, seed)
    return X.sweep_point(point, seed, images, clf, vae, oracle, cfg.engine, fisher)


SWEEP_FIELDS = ("key", "method", "gamma", "alpha", "lam", "n", "lr", "seed", "n_inputs", "n_explanations",
                "validity", "any_valid", "success", "similarity", "sparsity")


def run_sweep(cfg: ExperimentConfig, layout: X.Layout, workers: int | None = None, limit: int | None = None) -> Path:
    points = cfg.sweep.points()
    tasks = [(p, s) for s in cfg.seeds for p in points]
    order = {row_key(p, s): i for i, (p, s) in enumerate(tasks)}
    partial = layout.sweep / "rows.partial.csv"
    done = {r["key"]: r for r in X.read_rows(partial) if r.get("key") in order}
    todo = [(p, s) for p, s in tasks if row_key(p, s) not in done]
    if done:
        log.info("resuming sweep: %d of %d rows already complete", len(done), len(tasks))
    if limit is not None:
        todo = todo[:limit]
    # fail fast on missing artifacts before spawning workers
    for s in sorted({s for _, s in todo}):
        for path, what in ((layout.model(X.classifier_name("biased", s)), "classifier checkpoint"),
                           (layout.model("vae"), "VAE checkpoint"), (layout.model("oracle"), "oracle checkpoint"),
                           (layout.dataset("unbiased", cfg.seeds[0]), "dataset")):
            X.require(path, what)
    layout.sweep.mkdir(parents=True, exist_ok=True)
    new_file = not partial.exists() or partial.stat().st_size == 0
    cfg_text, root = cfg.dumps(), str(layout.root)
    payload = [(cfg_text, root, p, s) for p, s in todo]
    n = min(X.worker_count(workers), max(1, len(payload)))
    with open(partial, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        if new_file:
            writer.writeheader()

        def record(row):
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            fh.flush()
            done[row["key"]] = {k: str(v) if not isinstance(v, float) else repr(v) for k, v in row.items()}

        if n == 1:
            for task in payload:
                record(_sweep_task(task))
        else:
            with get_context("spawn").Pool(n) as pool:
                for row in pool.imap_unordered(_sweep_task, payload):
                    record(row)
    rows = sorted(done.values(), key=lambda r: order[r["key"]])
    out = layout.sweep / "sweep.csv"
    if len(rows) == len(tasks):
        with open(out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
    else:
        log.info("sweep incomplete: %d of %d rows", len(rows), len(tasks))
    return out


def cmd_sweep(args) -> int:
    cfg, _, layout = _context(args)
    if args.seed is not None:
        cfg.seeds = (args.seed,)
    out = run_sweep(cfg, layout, args.workers, args.limit)
    print(out if out.exists() else layout.sweep / "rows.partial.csv")
    return EXIT_OK


def sweep_summary(rows: list[dict]) -> str:
    lines = ["method           mean_success  mean_similarity  mean_validity  rows"]
    by: dict[str, list[dict]] = {}
    for r in rows:
        by.setdefault(r["method"], []).append(r)
    for method in [m for m in METHODS if m in by]:
        rs = by[method]
        mean = lambda k: float(np.mean([float(r[k]) for r in rs]))
        lines.append(f"{method:16s} {mean('success'):13.4f} {mean('similarity'):16.4f} {mean('validity'):14.4f} {len(rs):5d}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    cfg, _, layout = _context(args)
    sweep_rows = X.read_rows(layout.sweep / "sweep.csv") or X.read_rows(layout.sweep / "rows.partial.csv")
    metric_rows = X.read_rows(layout.reports / "metrics.csv")
    if not sweep_rows and not metric_rows:
        raise X.MissingArtifact(f"nothing to report: run 'dive sweep' or 'dive evaluate' first ({layout.root})")
    parts = []
    if sweep_rows:
        parts.append("## sweep: success rate against similarity, per method\n" + sweep_summary(sweep_rows))
    if metric_rows:
        parts.append("## evaluated bundles\n" + metrics_table(metric_rows))
    text = "\n".join(parts)
    layout.reports.mkdir(parents=True, exist_ok=True)
    (layout.reports / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# -- entry point -----------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="run seed (default: first seed in the config)")
    common.add_argument("--out", help="output directory (default: experiment.out_dir)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=JSON", help="override one config value")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    p = argparse.ArgumentParser(prog="dive", description="Diverse counterfactual explanation lab")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="sample the unbiased and biased datasets")
    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("model", choices=("vae", "classifier", "oracle"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--biased", action="store_true", help="classifier: train on the biased dataset")
    t.add_argument("--ood", action="store_true", help="vae: exclude the held-out shapes")
    e = sub.add_parser("explain", parents=[common], help="write explanation bundles")
    e.add_argument("--index", type=int, action="append", help="dataset record to explain (repeatable)")
    e.add_argument("--method", choices=METHODS)
    e.add_argument("--target", type=float, help="also interpolate each explanation to this classifier output")
    e.add_argument("--classifier", choices=("biased", "unbiased"), default="biased")
    e.add_argument("--ood", action="store_true", help="use the VAE trained without the held-out shapes")
    v = sub.add_parser("evaluate", parents=[common], help="score explanation bundles")
    v.add_argument("--bundles", help="bundle root (default: <out>/bundles)")
    v.add_argument("--report-dir", help="where to write metrics (default: <out>/reports)")
    s = sub.add_parser("sweep", parents=[common], help="run the hyperparameter grid")
    s.add_argument("--workers", type=int, help="worker processes (default: logical cores, capped by DIVE_THREADS)")
    s.add_argument("--limit", type=int, help="stop after this many new rows")
    sub.add_parser("report", parents=[common], help="summarise sweep and evaluation outputs")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "explain": cmd_explain, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        target = getattr(args, "target", None)
        if target is not None and not 0.0 <= target <= 1.0:
            raise ConfigError(f"--target: {target} outside [0, 1]")
        if getattr(args, "epochs", None) is not None and args.epochs < 1:
            raise ConfigError(f"--epochs: {args.epochs} must be positive")
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except X.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
