"""Confusion-matrix metrics, ROC-AUC, and the all-pairs cross-site evaluation.

Sensitivity and specificity are left undefined (None) when their class is
absent from a test set rather than silently defaulting: several synthetic
sites are skewed enough that a 10% test split can miss a class entirely, and
a silent 0 or 0.5 would corrupt every downstream comparison.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, LengthMismatch, SingleClass
from .tensors import TensorMap

POSITIVE_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class EvalReport:
    """Metrics for one (model, test set) pair.

    sensitivity/specificity/balanced_accuracy/roc_auc are None when undefined
    (missing class). accuracy is always defined for a nonempty sample.
    """

    counts: ConfusionCounts
    sensitivity: Optional[float]
    specificity: Optional[float]
    balanced_accuracy: Optional[float]
    accuracy: float
    roc_auc: Optional[float]
    model_site: str = ""
    test_site: str = ""


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape[0] != y.shape[0]:
        raise LengthMismatch(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    if s.shape[0] == 0:
        raise EmptyInput("no samples")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def confusion(scores: Sequence[float], labels: Sequence[int], threshold: float = POSITIVE_THRESHOLD) -> ConfusionCounts:
    """Counts at a threshold; a score equal to the threshold predicts positive."""
    s, y = _as_arrays(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def sensitivity(c: ConfusionCounts) -> Optional[float]:
    return c.tp / (c.tp + c.fn) if (c.tp + c.fn) else None


def specificity(c: ConfusionCounts) -> Optional[float]:
    return c.tn / (c.tn + c.fp) if (c.tn + c.fp) else None


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outscores a random negative, ties at 1/2.

    Computed with midranks, which equals exhaustive (pos, neg) pair counting
    and the trapezoidal area under the ROC curve.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"AUC undefined: {n_pos} positives, {n_neg} negatives")
    order = np.argsort(s, kind="stable")
    sorted_scores = s[order]
    # midrank for each tie group: mean of the occupied 1-based positions
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [s.size]))
    ranks = np.empty(s.size, dtype=np.float64)
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = (a + b + 1) / 2.0
    rank_sum_pos = float(np.sum(ranks[y == 1]))
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate(
    scores: Sequence[float],
    labels: Sequence[int],
    threshold: float = POSITIVE_THRESHOLD,
    model_site: str = "",
    test_site: str = "",
) -> EvalReport:
    """Full report for one score/label sample; AUC None on single-class sets."""
    counts = confusion(scores, labels, threshold)
    sens = sensitivity(counts)
    spec = specificity(counts)
    bal = (sens + spec) / 2.0 if sens is not None and spec is not None else None
    try:
        auc = roc_auc(scores, labels)
    except SingleClass:
        auc = None
    return EvalReport(
        counts=counts,
        sensitivity=sens,
        specificity=spec,
        balanced_accuracy=bal,
        accuracy=(counts.tp + counts.tn) / counts.total,
        roc_auc=auc,
        model_site=model_site,
        test_site=test_site,
    )


def cross_eval(
    models: Mapping[str, TensorMap],
    sites: Mapping[str, "SiteDataset"],
    threshold: float = POSITIVE_THRESHOLD,
) -> list[EvalReport]:
    """One EvalReport per (model_site, test_site) pair, test split only.

    Single-class cells are reported with roc_auc=None instead of aborting the
    matrix. Reports come back sorted by (model_site, test_site).
    """
    from .trainer import predict_proba  # local import; trainer builds on tensors only

    if not models or not sites:
        raise EmptyInput("cross_eval needs at least one model and one site")
    reports = []
    for model_site in sorted(models):
        model = models[model_site]
        input_dim = model.shape(model.names[0])[0]
        for test_site in sorted(sites):
            ds = sites[test_site]
            if ds.features.shape[1] != input_dim:
                raise DimensionMismatch(
                    f"model {model_site!r} expects {input_dim} features, "
                    f"site {test_site!r} has {ds.features.shape[1]}"
                )
            idx = ds.test_idx
            scores = predict_proba(model, ds.features[idx])
            reports.append(
                evaluate(scores, ds.labels[idx], threshold, model_site=model_site, test_site=test_site)
            )
    return reports


_CSV_COLUMNS = (
    "model_site,test_site,tp,fp,tn,fn,"
    "sensitivity,specificity,balanced_accuracy,accuracy,roc_auc"
)


def _cell(value: Optional[float]) -> str:
    return "" if value is None else format(value, ".10g")


def matrix_to_csv(reports: Sequence[EvalReport]) -> str:
    """CSV export of an evaluation matrix; undefined cells are left empty."""
    buf = io.StringIO()
    buf.write(_CSV_COLUMNS + "\n")
    for r in reports:
        c = r.counts
        buf.write(
            f"{r.model_site},{r.test_site},{c.tp},{c.fp},{c.tn},{c.fn},"
            f"{_cell(r.sensitivity)},{_cell(r.specificity)},"
            f"{_cell(r.balanced_accuracy)},{_cell(r.accuracy)},{_cell(r.roc_auc)}\n"
        )
    return buf.getvalue()
