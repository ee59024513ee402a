"""Metric identity and oracle tests (AUC vs exhaustive pair counting)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedorch.errors import EmptyInput, LengthMismatch, SingleClass
from fedorch.metrics import (
    ConfusionCounts,
    confusion,
    evaluate,
    matrix_to_csv,
    roc_auc,
    sensitivity,
    specificity,
)


def pair_counting_auc(scores, labels):
    """Brute-force oracle: fraction of (pos, neg) pairs won, ties at 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


# --- confusion ----------------------------------------------------------------

def test_confusion_single_true_positive():
    c = confusion([0.9], [1])
    assert (c.tp, c.fp, c.tn, c.fn) == (1, 0, 0, 0)


def test_threshold_tie_counts_positive():
    c = confusion([0.5], [0])
    assert c.fp == 1 and c.tn == 0


def test_reported_operating_point():
    # 90% sensitivity / 85% specificity operating point as raw counts
    c = ConfusionCounts(tp=90, fn=10, tn=85, fp=15)
    assert sensitivity(c) == pytest.approx(0.90)
    assert specificity(c) == pytest.approx(0.85)
    r_scores = [0.9] * 90 + [0.1] * 10 + [0.1] * 85 + [0.9] * 15
    r_labels = [1] * 100 + [0] * 100
    report = evaluate(r_scores, r_labels)
    assert report.counts == c
    assert report.balanced_accuracy == pytest.approx(0.875)
    assert report.accuracy == pytest.approx(0.875)


def test_length_mismatch_and_empty():
    with pytest.raises(LengthMismatch):
        confusion([0.5, 0.5], [1])
    with pytest.raises(EmptyInput):
        confusion([], [])


def test_identity_relations_hold_exactly():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(2, 200))
        scores = rng.random(n)
        labels = rng.integers(0, 2, n)
        report = evaluate(scores, labels)
        c = report.counts
        assert c.tp + c.fp + c.tn + c.fn == n
        if report.sensitivity is not None:
            assert report.sensitivity == c.tp / (c.tp + c.fn)
        if report.specificity is not None:
            assert report.specificity == c.tn / (c.tn + c.fp)
        if report.balanced_accuracy is not None:
            assert report.balanced_accuracy == (report.sensitivity + report.specificity) / 2


# --- roc_auc ------------------------------------------------------------------

def test_auc_perfect_separation():
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0


def test_auc_all_ties():
    assert roc_auc([0.4, 0.4, 0.4, 0.4], [1, 0, 1, 0]) == 0.5


def test_auc_hand_computed_pairs():
    # pos {0.8, 0.4}, neg {0.6, 0.2}: wins 3 of 4 pairs
    assert roc_auc([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75


def test_auc_single_class_is_an_error():
    with pytest.raises(SingleClass):
        roc_auc([0.1, 0.9], [1, 1])
    with pytest.raises(SingleClass):
        roc_auc([0.1, 0.9], [0, 0])


def test_auc_matches_pair_counting_oracle():
    rng = np.random.default_rng(17)
    for _ in range(300):
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # coarse grid forces plenty of ties
        scores = rng.integers(0, 6, n) / 5.0
        got = roc_auc(scores, labels)
        assert got == pytest.approx(pair_counting_auc(scores, labels), abs=1e-12)


def test_auc_symmetry_under_negation():
    rng = np.random.default_rng(23)
    for _ in range(200):
        n = int(rng.integers(2, 100))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.random(n), 2)
        assert roc_auc(scores, labels) + roc_auc(-scores, labels) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.integers(min_value=-10**6, max_value=10**6), min_size=2, max_size=40),
    st.randoms(use_true_random=False),
)
def test_auc_monotone_transform_invariance(raw_scores, pyrandom):
    # integer grid keeps the affine map injective in float64
    scores = [s / 100.0 for s in raw_scores]
    labels = [pyrandom.randint(0, 1) for _ in scores]
    if min(labels) == max(labels):
        labels[0] = 1 - labels[0]
    base = roc_auc(scores, labels)
    transformed = [3.0 * s + 7.0 for s in scores]  # strictly increasing affine map
    assert roc_auc(transformed, labels) == pytest.approx(base, abs=1e-12)


# --- cross_eval -----------------------------------------------------------------

def test_cross_eval_single_pair_equals_direct_evaluation():
    from fedorch.datakit import SiteProfile, generate_site
    from fedorch.metrics import cross_eval
    from fedorch.trainer import ModelSpec, init_model, predict_proba

    ds = generate_site(SiteProfile("solo", 60, 0.5, 0.0, 1.0, seed=4), 3)
    model = init_model(ModelSpec(input_dim=3, seed=1))
    reports = cross_eval({"solo": model}, {"solo": ds})
    assert len(reports) == 1
    direct = evaluate(
        predict_proba(model, ds.features[ds.test_idx]), ds.labels[ds.test_idx],
        model_site="solo", test_site="solo",
    )
    assert reports[0] == direct


def test_cross_eval_eight_sites_yields_64_reports():
    from fedorch.datakit import preset_sites
    from fedorch.metrics import cross_eval
    from fedorch.trainer import ModelSpec, init_model

    sites, input_dim = preset_sites("eight-sites")
    models = {ds.site_id: init_model(ModelSpec(input_dim=input_dim, seed=i))
              for i, ds in enumerate(sites)}
    reports = cross_eval(models, {ds.site_id: ds for ds in sites})
    assert len(reports) == 64


def test_cross_eval_constant_positive_classifier():
    """A model scoring ~0.99 everywhere has sensitivity 1 and specificity 0."""
    from fedorch.datakit import SiteProfile, generate_site
    from fedorch.metrics import cross_eval
    from fedorch.tensors import TensorMap

    ds = generate_site(SiteProfile("skewed", 200, 0.17, 0.0, 1.0, seed=9), 2)
    always_positive = TensorMap([("w0", (2, 1), [0.0, 0.0]), ("b0", (1,), [6.0])])
    (report,) = cross_eval({"m": always_positive}, {"skewed": ds})
    assert report.sensitivity == 1.0
    assert report.specificity == 0.0


def test_cross_eval_dimension_mismatch():
    from fedorch.datakit import SiteProfile, generate_site
    from fedorch.errors import DimensionMismatch
    from fedorch.metrics import cross_eval
    from fedorch.trainer import ModelSpec, init_model

    ds = generate_site(SiteProfile("s", 40, 0.5, 0.0, 1.0, seed=1), 3)
    model = init_model(ModelSpec(input_dim=5, seed=0))
    with pytest.raises(DimensionMismatch):
        cross_eval({"m": model}, {"s": ds})


# --- evaluate / export ----------------------------------------------------------

def test_single_class_report_fields():
    report = evaluate([0.9, 0.8], [1, 1])
    assert report.roc_auc is None
    assert report.specificity is None
    assert report.balanced_accuracy is None
    assert report.sensitivity == 1.0
    assert report.accuracy == 1.0


def test_matrix_csv_shape_and_empty_cells():
    defined = evaluate([0.9, 0.1], [1, 0], model_site="a", test_site="b")
    undefined = evaluate([0.9, 0.8], [1, 1], model_site="a", test_site="c")
    text = matrix_to_csv([defined, undefined])
    lines = text.strip().split("\n")
    assert lines[0].split(",") == [
        "model_site", "test_site", "tp", "fp", "tn", "fn",
        "sensitivity", "specificity", "balanced_accuracy", "accuracy", "roc_auc",
    ]
    assert lines[1].split(",")[-1] == "1"
    assert lines[2].split(",")[-1] == ""  # undefined AUC cell left empty
