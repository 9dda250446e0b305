"""Drive the full command-line pipeline for every seed of a config.

    python scripts/run_pipeline.py --config my.ini --out runs/demo

Stages that already produced their artifact are skipped, so an interrupted
run can simply be restarted.
"""
import argparse
import logging
import sys
from pathlib import Path

from dive.cli import main
from dive.config import ExperimentConfig
from dive.experiments import Layout, classifier_name

log = logging.getLogger("pipeline")


def step(argv: list[str]) -> None:
    log.info("dive %s", " ".join(argv))
    code = main(argv)
    if code:
        sys.exit(code)


def run(config: str | None, out: str, skip_sweep: bool) -> None:
    cfg = (ExperimentConfig.load(config) if config else ExperimentConfig()).validate()
    layout = Layout(Path(out))
    base = ["--out", out] + (["--config", config] if config else [])
    shared = cfg.seeds[0]
    for seed in cfg.seeds:
        if not layout.dataset("biased", seed).exists():
            step(["gen-data", "--seed", str(seed), *base])
    for model, flags in (("oracle", []), ("vae", []), ("vae_ood", ["--ood"])):
        if not layout.model(model).exists():
            step(["train", model.split("_")[0], "--seed", str(shared), *flags, *base])
    for seed in cfg.seeds:
        for kind in ("biased", "unbiased"):
            if not layout.model(classifier_name(kind, seed)).exists():
                step(["train", "classifier", "--seed", str(seed), *(["--biased"] if kind == "biased" else []), *base])
    for method in cfg.sweep.methods:
        step(["explain", "--seed", str(shared), "--method", method, "--target", "0.9", *base])
    step(["evaluate", "--seed", str(shared), *base])
    if not skip_sweep:
        step(["sweep", *base])
    step(["report", *base])


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", default="runs/pipeline")
    p.add_argument("--skip-sweep", action="store_true", help="stop after evaluating the default explanations")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    run(args.config, args.out, args.skip_sweep)
