import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from oracles import pairwise_auc, sweep_average_precision
from promptdistill.errors import AggregationError, UndefinedMetricError, ValidationError
from promptdistill.metrics import (
    METRIC_NAMES,
    RunReport,
    aggregate,
    aggregates_to_csv,
    aggregates_to_markdown,
    confusion_metrics,
    evaluate_scores,
    pr_auc,
    roc_auc,
)


def random_set(seed, n=50, ties=False):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    labels[:2] = [0, 1]
    scores = rng.random(n)
    if ties:
        scores = np.round(scores * 5) / 5
    return scores, labels


def test_auc_trivial_cases():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("ties", [False, True])
def test_auc_matches_pairwise_oracle(seed, ties):
    scores, labels = random_set(seed, ties=ties)
    assert abs(roc_auc(scores, labels) - pairwise_auc(scores.tolist(), labels.tolist())) <= 1e-12


def test_pr_trivial_cases():
    assert pr_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    labels = [1, 0, 0, 1, 0]
    assert abs(pr_auc([0.5] * 5, labels) - 0.4) <= 1e-15
    with pytest.raises(UndefinedMetricError):
        pr_auc([0.1, 0.2], [0, 0])


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("ties", [False, True])
def test_pr_matches_threshold_sweep(seed, ties):
    scores, labels = random_set(seed, ties=ties)
    assert abs(pr_auc(scores, labels) - sweep_average_precision(scores.tolist(), labels.tolist())) <= 1e-12


def test_confusion_examples():
    c = confusion_metrics([0.9, 0.6, 0.4, 0.1], [1, 0, 1, 0])
    assert (c.accuracy, c.precision, c.sensitivity) == (0.5, 0.5, 0.5)
    c = confusion_metrics([0.9, 0.1, 0.8], [1, 0, 1])
    assert (c.accuracy, c.precision, c.sensitivity) == (1.0, 1.0, 1.0)
    c = confusion_metrics([0.1, 0.2, 0.3], [1, 0, 1])
    assert c.precision is None and c.sensitivity == 0.0


def test_input_validation():
    with pytest.raises(ValidationError):
        roc_auc([0.1, 0.2], [0, 2])
    with pytest.raises(ValidationError):
        roc_auc([0.1, 0.2, 0.3], [0, 1])


def test_run_report_range_and_csv():
    with pytest.raises(ValidationError):
        RunReport(1.2, 0.5, 0.5, 0.5, 0.5)
    r = RunReport(0.9, 0.8, 0.75, None, 0.5, seed=3, config_digest="abc", label="off")
    lines = r.to_csv().splitlines()
    assert lines[0] == "label,seed,config_digest,auc,prc,accuracy,precision,sensitivity"
    assert lines[1] == "off,3,abc,0.900000,0.800000,0.750000,undefined,0.500000"


def test_evaluate_scores_marks_undefined_auc():
    r = evaluate_scores([0.2, 0.7], [0, 0])
    assert r.auc is None and r.prc is None and r.accuracy == 0.5


def test_aggregate_examples():
    reps = [RunReport(a, 0.5, 0.5, 0.5, 0.5, seed=i, config_digest="d") for i, a in enumerate([0.9, 1.0])]
    agg = aggregate(reps)
    assert agg["auc"].render() == "0.9500±0.0500"
    same = aggregate([RunReport(0.7, 0.6, 0.5, 0.4, 0.3, config_digest="d")] * 3)
    assert all(same[m].std == 0.0 for m in METRIC_NAMES)


def test_aggregate_scalar_oracle(rng):
    vals = rng.random((5, 5))
    reps = [RunReport(*row, seed=i, config_digest="d") for i, row in enumerate(vals)]
    agg = aggregate(reps)
    for j, m in enumerate(METRIC_NAMES):
        col = list(vals[:, j])
        mean = sum(col) / 5
        std = math.sqrt(sum((v - mean) ** 2 for v in col) / 5)
        assert abs(agg[m].mean - mean) <= 1e-12 and abs(agg[m].std - std) <= 1e-12


def test_aggregate_errors_and_undefined():
    with pytest.raises(AggregationError):
        aggregate([RunReport(0.5, 0.5, 0.5, 0.5, 0.5)])
    with pytest.raises(AggregationError, match="different configs"):
        aggregate([RunReport(0.5, 0.5, 0.5, 0.5, 0.5, config_digest="a"), RunReport(0.5, 0.5, 0.5, 0.5, 0.5, config_digest="b")])
    agg = aggregate([RunReport(0.5, 0.5, 0.5, None, 0.5), RunReport(0.5, 0.5, 0.5, 0.5, 0.5)])
    assert agg["precision"].render() == "undefined"


def test_table_layout():
    rows = [aggregate([RunReport(0.5 + 0.1 * i, 0.5, 0.5, 0.5, 0.5, seed=s) for s in range(2)], label=f"r{i}") for i in range(3)]
    md = aggregates_to_markdown(rows, {"l_prompt": ["✗", "✓", "✓"], "w_adaptive": ["✗", "✗", "✓"]})
    lines = md.strip().splitlines()
    assert lines[0] == "| l_prompt | w_adaptive | AUC | PRC | Accuracy | Precision | Sensitivity |"
    assert len(lines) == 2 + 3
    assert all(line.count("±") == 5 for line in lines[2:])
    csv_lines = aggregates_to_csv(rows).strip().splitlines()
    assert len(csv_lines) == 4 and csv_lines[0].startswith("label,n_runs,auc_mean,auc_std")


# -- properties ----------------------------------------------------------------------

score_sets = st.integers(4, 30).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(0, 1, allow_nan=False), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
    )
)


@settings(max_examples=60, deadline=None)
@given(score_sets)
def test_auc_invariant_under_increasing_transform(data):
    scores, labels = np.array(data[0]), np.array(data[1])
    assume(0 < labels.sum() < len(labels))
    a = roc_auc(scores, labels)
    # rank-based map: strictly increasing and exact in floating point
    transformed = np.searchsorted(np.unique(scores), scores).astype(float) ** 2 - 7.5
    assert abs(roc_auc(transformed, labels) - a) <= 1e-12
    assert abs(a - pairwise_auc(scores.tolist(), labels.tolist())) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(score_sets)
def test_auc_complement_symmetry(data):
    scores, labels = np.array(data[0]), np.array(data[1])
    assume(0 < labels.sum() < len(labels))
    assume(len(set(scores.tolist())) == len(scores))
    assert abs(roc_auc(scores, labels) + roc_auc(scores, 1 - labels) - 1.0) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(score_sets, st.floats(0, 1), st.floats(0, 1))
def test_sensitivity_nonincreasing_in_threshold(data, t1, t2):
    scores, labels = np.array(data[0]), np.array(data[1])
    assume(labels.sum() > 0)
    lo, hi = sorted((t1, t2))
    assert confusion_metrics(scores, labels, hi).sensitivity <= confusion_metrics(scores, labels, lo).sensitivity


@settings(max_examples=60, deadline=None)
@given(score_sets)
def test_pr_matches_sweep_property(data):
    scores, labels = np.array(data[0]), np.array(data[1])
    assume(labels.sum() > 0)
    assert abs(pr_auc(scores, labels) - sweep_average_precision(scores.tolist(), labels.tolist())) <= 1e-12
