"""Properties of the networks after default training on the default seed."""
from dataclasses import replace

import numpy as np
import pytest

from dive.models import accuracy, oracle_accuracies, per_dim_kl, reconstruct, train_vae
from dive.optim import SeededRng

pytestmark = pytest.mark.slow


def _style_consistent(ds, idx):
    allowed = ds.config.style_assignment
    return np.array([s in allowed[int(y)] for s, y in zip(ds.style_ids[idx], ds.labels[idx])])


def test_unbiased_classifier_is_accurate(desk, classifiers):
    ds = desk.dataset
    acc = accuracy(classifiers(0)["unbiased"], ds.images[ds.val_idx], ds.labels[ds.val_idx])
    assert acc >= 0.95


def test_biased_classifier_leans_on_style(desk, classifiers):
    # the shared dataset is unbiased, so both subsets are well populated
    ds = desk.dataset
    val = ds.val_idx
    consistent = _style_consistent(ds, val)
    assert 0.2 < consistent.mean() < 0.8
    clf = classifiers(0)["biased"]
    hit = (clf.prob(ds.images[val]) > 0.5).astype(int) == ds.labels[val]
    assert hit[consistent].mean() - hit[~consistent].mean() > 0.1


def test_oracle_recognises_shapes(desk):
    assert oracle_accuracies(desk.oracle, desk.dataset, desk.dataset.val_idx)["shape"] >= 0.95


def test_vae_reconstructs_validation_images(desk):
    x = desk.dataset.images[desk.dataset.val_idx]
    assert np.abs(reconstruct(desk.vae, x) - x).mean() < 0.15


def test_vae_loss_descends(desk):
    total = {epoch: v for epoch, name, v in desk.logs["vae"] if name == "total"}
    assert total[10] < total[1]


def test_ood_vae_never_sees_held_out_shapes(desk):
    ds = desk.dataset
    held = set(ds.config.ood_shape_ids)
    assert not held & set(ds.shape_ids[ds.gen_train_idx].tolist())
    assert desk.vae_ood.meta.get("ood") is True


@pytest.mark.xfail(strict=False, reason="20 desk epochs leave every dimension above 0.01 nats (min 0.089 at beta 10)")
def test_large_beta_collapses_a_latent_dimension(desk, desk_config):
    ds = desk.dataset
    cfg = replace(desk_config.vae, beta=10.0)
    vae, _ = train_vae(ds, ds.train_idx, cfg, SeededRng(desk_config.seeds[0]).spawn("train", "vae", "beta10"),
                       desk.oracle)
    kl = per_dim_kl(vae, ds.images[ds.val_idx])
    assert kl.min() < 0.01, f"per-dimension KL {np.round(kl, 3)}"
