import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dive.data import (
    DatasetConfig, FactorVector, load_dataset, manifest_path, mutual_information, render,
    sample_dataset, sample_factors, save_dataset, style_group,
)
from dive.optim import SeededRng


@pytest.mark.parametrize("style", range(8))
def test_disc_is_mirror_symmetric(style):
    img = render(FactorVector(0, style, 0.0, 0.8, 0.0, 0.0))
    assert np.max(np.abs(img - img[:, ::-1])) < 1e-9


def test_render_deterministic_and_in_range():
    f = FactorVector(9, 5, 13.0, 0.7, -1.5, 2.25)
    a, b = render(f), render(f)
    assert np.array_equal(a, b)
    assert a.shape == (32, 32) and a.min() >= -1 and a.max() <= 1


@pytest.mark.parametrize("scale", [0.6, 0.7, 0.8, 0.9, 1.0])
def test_disc_area_matches_circle(scale):
    count = int((render(FactorVector(0, 0, 0.0, scale)) > 0).sum())
    expected = np.pi * (scale * 10.0) ** 2
    assert abs(count - expected) / expected < 0.10


def test_render_rejects_out_of_range():
    with pytest.raises(ValueError):
        render(FactorVector(0, 0, 40.0))
    with pytest.raises(ValueError):
        render(FactorVector(16, 0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 15), st.integers(0, 7), st.floats(-25, 25), st.floats(0.6, 1.0),
       st.floats(-3, 3), st.floats(-3, 3))
def test_render_property_range(shape, style, rot, scale, dx, dy):
    img = render(FactorVector(shape, style, rot, scale, dx, dy))
    assert np.all(np.isfinite(img)) and img.min() >= -1.0 and img.max() <= 1.0
    assert (img > -1).sum() > 0


def _pref_rate(factors, cfg):
    labels = (factors[:, 0] < 8).astype(int)
    style = factors[:, 1].astype(int)
    hits = [style[labels == lab] for lab in (0, 1)]
    return [np.isin(h, cfg.style_assignment[lab]).mean() for lab, h in zip((0, 1), hits)]


def test_full_bias_forces_preferred_styles():
    cfg = DatasetConfig(n_samples=4000, bias_strength=1.0)
    assert _pref_rate(sample_factors(cfg, SeededRng(1)), cfg) == [1.0, 1.0]


def test_no_bias_decorrelates_style_and_label():
    cfg = DatasetConfig(n_samples=20000, bias_strength=0.0)
    f = sample_factors(cfg, SeededRng(2))
    labels = (f[:, 0] < 8).astype(float)
    in_subset1 = np.isin(f[:, 1].astype(int), cfg.style_assignment[1]).astype(float)
    assert abs(np.corrcoef(labels, in_subset1)[0, 1]) < 0.05


def test_label_balance():
    f = sample_factors(DatasetConfig(n_samples=10000), SeededRng(3))
    assert abs((f[:, 0] < 8).mean() - 0.5) < 0.02


def test_bias_monotone_in_mutual_information():
    mis = []
    for rho in (0.0, 0.5, 1.0):
        f = sample_factors(DatasetConfig(n_samples=10000, bias_strength=rho), SeededRng(4))
        mis.append(mutual_information((f[:, 0] < 8).astype(int), f[:, 1].astype(int)))
    assert mis[0] <= mis[1] <= mis[2]


@pytest.fixture(scope="module")
def small_ds():
    return sample_dataset(DatasetConfig(n_samples=300, bias_strength=0.3,
                                        ood_shape_ids=tuple(range(8, 16))), SeededRng(5))


def test_sample_dataset_contract(small_ds):
    ds = small_ds
    assert len(ds) == 300
    assert np.array_equal(ds.labels, (ds.shape_ids < 8).astype(int))
    assert len(ds.val_idx) == 30 and len(ds.train_idx) == 270
    assert not set(ds.val_idx) & set(ds.train_idx)
    assert np.all(ds.shape_ids[ds.gen_train_idx] < 8)
    for i in (0, 17, 299):
        img, fv, _ = ds.record(i)
        assert np.array_equal(img, render(fv))


def test_dataset_reproducible(small_ds):
    again = sample_dataset(small_ds.config, SeededRng(5))
    assert np.array_equal(again.images, small_ds.images)
    assert np.array_equal(again.val_idx, small_ds.val_idx)


def test_dataset_roundtrip(tmp_path, small_ds):
    p = tmp_path / "d.divd"
    save_dataset(small_ds, p)
    raw = p.read_bytes()
    assert raw[:4] == b"DIVD" and len(raw) == 10 + 300 * (4096 + 24 + 1)
    back = load_dataset(p)
    assert np.array_equal(back.factors, small_ds.factors)
    assert np.array_equal(back.images, small_ds.images.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.gen_train_idx, small_ds.gen_train_idx)
    # loaded factors re-render to the original float64 images
    img, fv, _ = back.record(3)
    assert np.array_equal(render(fv), small_ds.images[3].reshape(32, 32))
    p2 = tmp_path / "e.divd"
    save_dataset(back, p2)
    assert p2.read_bytes() == raw
    assert manifest_path(p2).read_text() == manifest_path(p).read_text()


def test_version_mismatch_named(tmp_path, small_ds):
    p = tmp_path / "d.divd"
    save_dataset(small_ds, p)
    raw = bytearray(p.read_bytes())
    raw[4:6] = (7).to_bytes(2, "little")
    p.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version 7.*version 1"):
        load_dataset(p)


def test_config_validation():
    with pytest.raises(ValueError, match="bias_strength"):
        DatasetConfig(bias_strength=1.5).validate()
    with pytest.raises(ValueError, match="ood_shape_ids"):
        DatasetConfig(ood_shape_ids=tuple(range(16))).validate()
    assert list(style_group([0, 3, 4, 7])) == [0, 0, 1, 1]
