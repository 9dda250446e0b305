"""Smoke runs of the experiment scripts on a tiny configuration."""
import importlib.util
from pathlib import Path

from dive.config import ExperimentConfig, SweepGrid
from dive.experiments import read_rows

from .test_cli import TINY

SCRIPTS = Path(__file__).resolve().parents[1] / "scripts"


def load_script(name):
    spec = importlib.util.spec_from_file_location(name, SCRIPTS / f"{name}.py")
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def test_pipeline_script_produces_every_stage(tmp_path):
    ini = tmp_path / "tiny.ini"
    ini.write_text(TINY)
    out = tmp_path / "out"
    load_script("run_pipeline").run(str(ini), str(out), skip_sweep=False)
    for name in ("oracle", "vae", "vae_ood", "classifier_biased_s1", "classifier_unbiased_s0"):
        assert (out / "models" / f"{name}.divc").exists()
    assert len(read_rows(out / "sweep" / "sweep.csv")) == 4
    assert (out / "reports" / "report.txt").read_text().count("fisher_spectral") >= 1
    # restarting skips finished stages and leaves the checkpoints alone
    before = (out / "models" / "vae.divc").stat().st_mtime_ns
    load_script("run_pipeline").run(str(ini), str(out), skip_sweep=True)
    assert (out / "models" / "vae.divc").stat().st_mtime_ns == before


def test_desk_experiment_script_writes_tables(tmp_path):
    cfg = ExperimentConfig.loads(TINY)
    grid = SweepGrid(methods=("xgem_plus", "dive"), gamma=(0.1,), alpha=(0.1,), lam=(0.0005,), n=(2,), lr=(0.1,),
                     xgem_lr=(0.1,))
    text = load_script("desk_experiments").run(cfg, tmp_path, grid)
    assert len(read_rows(tmp_path / "bias.csv")) == 2 * len(cfg.seeds)
    assert len(read_rows(tmp_path / "sweep.csv")) == 2 * len(cfg.seeds)
    assert {r["split"] for r in read_rows(tmp_path / "ood.csv")} == {"in_distribution", "held_out"}
    assert "xgem_plus" in text and (tmp_path / "summary.txt").read_text() == text
