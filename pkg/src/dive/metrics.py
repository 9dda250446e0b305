"""Scoring of counterfactuals against the classifier and the oracle."""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

FACTOR_HEADS = ("shape", "style", "rotation", "scale")
PRESENT, ABSENT = 0.9, 0.1


@dataclass(frozen=True)
class ExplanationJudgment:
    valid: bool
    oracle_label_on_cf: int
    classifier_label_on_cf: int
    success: bool
    proximity: float
    attribute_changes: int

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise ``1 - cos(a, b)`` clipped to [0, 2]; zero vectors count as orthogonal."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    den = na * nb
    cos = np.where(den > 0, np.sum(a * b, axis=1) / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(1.0 - cos, 0.0, 2.0)


def judge_batch(originals, counterfactuals, classifier, oracle) -> list[ExplanationJudgment]:
    """Judge counterfactual ``i`` against original ``i`` (originals may be one image, broadcast)."""
    cf = np.asarray(counterfactuals, dtype=float).reshape(-1, 1024)
    x = np.asarray(originals, dtype=float).reshape(-1, 1024)
    if len(x) == 1 and len(cf) > 1:
        x = np.repeat(x, len(cf), axis=0)
    if len(x) != len(cf):
        raise ValueError(f"{len(x)} originals for {len(cf)} counterfactuals")
    dec_x = classifier.prob(x) > 0.5
    dec_cf = classifier.prob(cf) > 0.5
    ox, ocf = oracle.predict(x), oracle.predict(cf)
    prox = cosine_distance(ox["embedding"], ocf["embedding"])
    changes = sum((ox[h] != ocf[h]).astype(int) for h in FACTOR_HEADS)
    out = []
    for i in range(len(cf)):
        valid = bool(dec_cf[i] != dec_x[i])
        out.append(ExplanationJudgment(
            valid=valid,
            oracle_label_on_cf=int(ocf["label"][i]),
            classifier_label_on_cf=int(dec_cf[i]),
            success=valid and int(ocf["label"][i]) != int(dec_cf[i]),
            proximity=float(prox[i]),
            attribute_changes=int(changes[i]),
        ))
    return out


def judge(x, x_tilde, classifier, oracle) -> ExplanationJudgment:
    return judge_batch(x, x_tilde, classifier, oracle)[0]


def success_rate(judgments) -> tuple[float, list[tuple[bool, float]]]:
    """Fraction of successful explanations and (success, similarity) scatter points."""
    judgments = list(judgments)
    if not judgments:
        raise ValueError("success_rate needs at least one judgment")
    points = [(j.success, 1.0 - j.proximity) for j in judgments]
    return float(np.mean([j.success for j in judgments])), points


def validity_rate(judgments) -> float:
    judgments = list(judgments)
    if not judgments:
        raise ValueError("validity_rate needs at least one judgment")
    return float(np.mean([j.valid for j in judgments]))


def sparsity(judgments) -> float:
    """Mean number of oracle attributes changed by the valid explanations (NaN if none)."""
    changes = [j.attribute_changes for j in judgments if j.valid]
    return float(np.mean(changes)) if changes else float("nan")


@dataclass
class BiasReport:
    confounding: float
    n_valid: int
    # distribution[target_class][style_group] = share of valid counterfactuals
    distribution: dict = field(default_factory=dict)
    ground_truth: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def confounding_metric(originals, counterfactuals, oracle, targets, valid=None) -> BiasReport:
    """Share of valid counterfactuals whose oracle style group differs from the original's."""
    cf = np.asarray(counterfactuals, dtype=float).reshape(-1, 1024)
    x = np.asarray(originals, dtype=float).reshape(-1, 1024)
    targets = np.broadcast_to(np.asarray(targets), (len(cf),))
    keep = np.ones(len(cf), bool) if valid is None else np.asarray(valid, bool)
    if not keep.any():
        raise ValueError("confounding_metric needs at least one valid counterfactual")
    x, cf, targets = x[keep], cf[keep], targets[keep]
    gx, gcf = oracle.predict(x)["style_group"], oracle.predict(cf)["style_group"]
    dist = {}
    for t in (0, 1):
        sel = targets == t
        if sel.any():
            dist[t] = {g: float(np.mean(gcf[sel] == g)) for g in (0, 1)}
    return BiasReport(float(np.mean(gx != gcf)), int(keep.sum()), dist)


def accuracy_gap(predictions, labels, groups) -> float:
    """Per-class |acc(group 0) - acc(group 1)|, averaged over the two classes."""
    pred, labels, groups = (np.asarray(a) for a in (predictions, labels, groups))
    gaps = []
    for c in (0, 1):
        accs = []
        for g in (0, 1):
            sel = (labels == c) & (groups == g)
            if not sel.any():
                raise ValueError(f"no records with label {c} and nuisance group {g}")
            accs.append(np.mean(pred[sel] == c))
        gaps.append(abs(accs[0] - accs[1]))
    return float(np.mean(gaps))


def ground_truth_bias(classifier, images, labels, groups) -> float:
    return accuracy_gap((classifier.prob(images) > 0.5).astype(int), labels, groups)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    """2-Wasserstein distance between Gaussian fits of two embedding sets."""
    emb_a, emb_b = np.atleast_2d(emb_a), np.atleast_2d(emb_b)
    if len(emb_a) < 2 or len(emb_b) < 2:
        raise ValueError("frechet distance needs at least 2 samples per set")
    if min(len(emb_a), len(emb_b)) <= emb_a.shape[1]:
        warnings.warn(f"fewer samples than embedding dimensions ({emb_a.shape[1]}); covariance is singular",
                      RuntimeWarning, stacklevel=2)
    mu_a, mu_b = emb_a.mean(axis=0), emb_b.mean(axis=0)
    cov_a, cov_b = np.cov(emb_a, rowvar=False), np.cov(emb_b, rowvar=False)
    sa = _psd_sqrt(cov_a)
    cross = sa @ cov_b @ sa
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (cross + cross.T)), 0.0, None)).sum()
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def embedding_frechet(images_a, images_b, oracle) -> float:
    return frechet_distance(oracle.embed_np(images_a), oracle.embed_np(images_b))


def frechet_by_category(reference, reference_f, counterfactuals, cf_f, oracle) -> dict[str, float]:
    """Present / Absent / Overall distances between counterfactuals and real images.

    Present pairs counterfactuals with f >= 0.9 against reference images with
    f >= 0.9; Absent uses f <= 0.1. Categories with fewer than two images on
    either side are reported as NaN.
    """
    e_ref, e_cf = oracle.embed_np(reference), oracle.embed_np(counterfactuals)
    reference_f, cf_f = np.asarray(reference_f), np.asarray(cf_f)
    cats = {
        "present": (reference_f >= PRESENT, cf_f >= PRESENT),
        "absent": (reference_f <= ABSENT, cf_f <= ABSENT),
        "overall": (np.ones(len(e_ref), bool), np.ones(len(e_cf), bool)),
    }
    out = {}
    for name, (sr, sc) in cats.items():
        if sr.sum() < 2 or sc.sum() < 2:
            log.warning("frechet category %s has too few images (%d real, %d counterfactual)", name, sr.sum(), sc.sum())
            out[name] = float("nan")
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out[name] = frechet_distance(e_ref[sr], e_cf[sc])
    return out


def identity_from_embeddings(e_orig: np.ndarray, e_cf: np.ndarray, threshold: float = 0.5) -> tuple[float, float]:
    if len(e_orig) < 2 or len(e_orig) != len(e_cf):
        raise ValueError("identity metrics need at least 2 matched (original, counterfactual) pairs")
    na = e_orig / np.maximum(np.linalg.norm(e_orig, axis=1, keepdims=True), 1e-300)
    nb = e_cf / np.maximum(np.linalg.norm(e_cf, axis=1, keepdims=True), 1e-300)
    dist = 1.0 - nb @ na.T          # dist[i, j]: counterfactual i vs original j
    own = np.diag(dist)
    closeness = float(np.mean(np.all(own[:, None] <= dist, axis=1)))
    verification = float(np.mean(own < threshold))
    return closeness, verification


def identity_metrics(originals, counterfactuals, oracle) -> tuple[float, float]:
    """(latent closeness, verification accuracy) in the oracle embedding space."""
    return identity_from_embeddings(oracle.embed_np(originals), oracle.embed_np(counterfactuals))


# -- benchmark selection ---------------------------------------------------
@dataclass
class BenchmarkSelection:
    indices: np.ndarray
    kinds: list[str]
    warnings: list[str]


def select_benchmark(probs, labels, shape_ids, shapes=None, n_wrong: int = 2) -> BenchmarkSelection:
    """Per shape: correct examples with f nearest 0.9 and 0.1, plus ``n_wrong`` misclassified.

    Misclassified picks are the most confident mistakes. Missing picks are
    reported in ``warnings`` (and logged) rather than raised.
    """
    probs, labels, shape_ids = np.asarray(probs), np.asarray(labels), np.asarray(shape_ids)
    shapes = np.unique(shape_ids) if shapes is None else shapes
    correct = (probs > 0.5).astype(int) == labels
    idx, kinds, notes = [], [], []
    for s in shapes:
        pool = np.flatnonzero(shape_ids == s)
        good, bad = pool[correct[pool]], pool[~correct[pool]]
        for kind, level in (("correct_0.9", PRESENT), ("correct_0.1", ABSENT)):
            if len(good) == 0:
                notes.append(f"shape {s}: no correctly classified example for {kind}")
                continue
            order = np.argsort(np.abs(probs[good] - level), kind="stable")
            pick = next((g for g in good[order] if g not in idx), None)
            if pick is None:
                notes.append(f"shape {s}: only one correctly classified example")
                continue
            idx.append(int(pick))
            kinds.append(kind)
        wrong = bad[np.argsort(-np.abs(probs[bad] - 0.5), kind="stable")][:n_wrong]
        if len(wrong) < n_wrong:
            notes.append(f"shape {s}: {len(wrong)} of {n_wrong} misclassified examples available")
        idx += [int(w) for w in wrong]
        kinds += ["misclassified"] * len(wrong)
    for note in notes:
        log.warning(note)
    return BenchmarkSelection(np.array(idx, dtype=np.int64), kinds, notes)
