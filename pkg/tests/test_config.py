import pytest
from hypothesis import given, settings, strategies as st

from dive.config import ConfigError, ExperimentConfig, SweepGrid, row_key, row_seed
from dive.engine import EngineConfig


def test_default_round_trip_is_identity():
    cfg = ExperimentConfig()
    text = cfg.dumps()
    again = ExperimentConfig.loads(text)
    assert again == cfg and again.dumps() == text


finite = st.floats(0.0, 1.0, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 2**31), min_size=1, max_size=4), finite, st.integers(1, 15),
       st.one_of(st.none(), finite), st.lists(st.floats(0, 5, allow_nan=False), min_size=1, max_size=3),
       st.sampled_from(["pixel", "perceptual"]), st.integers(1, 20000))
def test_round_trip_property(seeds, rho, n, target, gammas, mode, n_samples):
    cfg = ExperimentConfig(seeds=tuple(seeds), biased_rho=rho)
    cfg.engine = EngineConfig(n=n, target=target)
    cfg.sweep = SweepGrid(gamma=tuple(gammas))
    cfg.vae.recon_mode = mode
    cfg.dataset.n_samples = n_samples
    again = ExperimentConfig.loads(cfg.dumps())
    assert again == cfg and again.dumps() == cfg.dumps()


def test_partial_file_keeps_defaults():
    cfg = ExperimentConfig.loads("[engine]\nmethod = \"fisher_spectral\"\n[vae]\nepochs = 3\n")
    assert cfg.engine.method == "fisher_spectral" and cfg.vae.epochs == 3
    assert cfg.classifier == ExperimentConfig().classifier


@pytest.mark.parametrize("text,field", [
    ("[dataset]\nbias_strength = 1.5\n", "dataset.bias_strength"),
    ("[engine]\nn = 16\n", "engine.n"),
    ("[vae]\nepochs = 0\n", "vae.epochs"),
    ("[sweep]\nn = []\n", "sweep.n"),
    ("[experiment]\nunbiased_rho = -0.1\n", "experiment.unbiased_rho"),
])
def test_validation_names_field(text, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        ExperimentConfig.loads(text).validate()


@pytest.mark.parametrize("text,field", [
    ("[engine]\nbogus = 1\n", "engine.bogus"),
    ("[engine]\nn = \"four\"\n", "engine.n"),
    ("[engine]\nn = four\n", "engine.n"),
    ("[nope]\nx = 1\n", "nope"),
])
def test_parse_errors_name_field(text, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        ExperimentConfig.loads(text)


def test_default_grid_values():
    g = SweepGrid()
    assert g.gamma == g.alpha == (0.0, 0.001, 0.1, 1.0)
    assert g.lam == (0.0001, 0.0005, 0.001) and g.n == (2, 4, 8) and g.lr == (0.05, 0.1)


def test_grid_points_per_method():
    pts = SweepGrid().points()
    by = {m: [p for p in pts if p["method"] == m] for m in SweepGrid().methods}
    assert len(by["dive"]) == 4 * 4 * 3 * 3 * 2
    assert len(by["xgem_plus"]) == 3 * 3 * 3
    assert all(p["gamma"] == 0 and p["alpha"] == 0 for p in by["xgem_plus"])
    assert {p["lr"] for p in by["xgem_plus"]} == {0.01, 0.05, 0.1}
    assert len(by["fisher_spectral"]) == 4 * 3 * 3 * 2
    assert len({row_key(p) for p in pts}) == len(pts)


def test_row_seed_depends_on_key_only():
    p = SweepGrid().points()[0]
    assert row_seed(3, row_key(p)) == row_seed(3, row_key(dict(p)))
    assert row_seed(3, row_key(p)) != row_seed(4, row_key(p))
