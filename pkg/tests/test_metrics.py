import io
import json
import unittest

import numpy as np
import pandas as pd
import pytest

from data_sources import LabeledDataset
from mathcore import RandomStream
from metrics import (
    MetricsError,
    SessionReport,
    emit_grid,
    emit_table,
    evaluate,
    final_improvement,
    harmonic,
    read_results_csv,
    result_rows,
    results_frame,
    summarize,
)
from model import MlpExtractor, PrototypeClassifier
from protocol import TrainedState

CE_SESSIONS = (0.7565, 0.7045, 0.6609, 0.6216, 0.5896, 0.5592, 0.5308, 0.5105, 0.4939)


def _session_reports(values, old=None, new=None):
    reports = [SessionReport(i, v, v) for i, v in enumerate(values)]
    if old is not None:
        reports[-1] = SessionReport(len(values) - 1, values[-1], old, new)
    return reports


def _axis_state(n_classes, base_ids, session_index=1):
    return TrainedState(
        MlpExtractor.identity(n_classes),
        PrototypeClassifier(np.eye(n_classes), tuple(range(n_classes))),
        None,
        tuple(base_ids),
        session_index=session_index,
    )


class PublishedArithmeticTests(unittest.TestCase):
    def test_performance_drop_and_harmonic_accuracy(self):
        summary = summarize(_session_reports([0.7687, 0.60], old=0.7115, new=0.2065))
        self.assertAlmostEqual(summary.pd * 100, 5.72, delta=0.005)
        self.assertAlmostEqual(summary.harmonic * 100, 32.01, delta=0.005)
        self.assertEqual(summary.base, 0.7687)
        self.assertEqual((summary.old, summary.new), (0.7115, 0.2065))

    def test_session_average(self):
        summary = summarize(_session_reports(CE_SESSIONS))
        self.assertAlmostEqual(summary.avg * 100, 60.31, delta=0.005)
        self.assertEqual(summary.final, 0.4939)

    def test_final_improvement_is_signed(self):
        self.assertAlmostEqual(final_improvement(0.5641, 0.4939) * 100, 7.02, delta=1e-9)
        self.assertAlmostEqual(final_improvement(0.4939, 0.5641) * 100, -7.02, delta=1e-9)


def test_harmonic_edge_cases():
    assert harmonic(0.0, 0.0) == 0.0
    assert harmonic(0.5, 0.5) == pytest.approx(0.5)
    assert harmonic(1.0, 0.0) == 0.0


def test_harmonic_never_exceeds_arithmetic_mean():
    stream = RandomStream(0, "test/harmonic")
    for old, new in stream.uniform(0.0, 1.0, (500, 2)):
        assert harmonic(old, new) <= (old + new) / 2 + 1e-15
        assert harmonic(old, new) <= 2 * max(old, new) * min(old, new) / (old + new) + 1e-15


def test_summary_invariants_on_random_reports():
    stream = RandomStream(1, "test/summary")
    for _ in range(100):
        values = list(stream.uniform(0.0, 1.0, 5))
        old, new = stream.uniform(0.0, 1.0, 2)
        summary = summarize(_session_reports(values, old=float(old), new=float(new)))
        assert summary.pd == pytest.approx(summary.base - summary.old, abs=1e-9)
        assert summary.avg == pytest.approx(sum(values) / 5, abs=1e-12)


def test_single_report_has_no_incremental_metrics():
    summary = summarize([SessionReport(0, 0.8, 0.8)])
    assert summary.avg == 0.8
    assert summary.old is None and summary.pd is None and summary.harmonic is None


def test_summarize_rejects_bad_report_lists():
    with pytest.raises(MetricsError):
        summarize([])
    with pytest.raises(MetricsError):
        summarize([SessionReport(1, 0.5, 0.5)])


def test_session_report_validates_fractions_and_per_class_agreement():
    with pytest.raises(MetricsError):
        SessionReport(0, 1.2, 0.5)
    with pytest.raises(MetricsError):
        SessionReport(0, 0.9, 0.9, per_class_acc={0: 0.5, 1: 0.5}, per_class_count={0: 1, 1: 1})


def test_evaluate_perfect_and_worst_classifiers():
    state = _axis_state(2, (0,))
    inputs = np.array([[1.0, 0.0], [2.0, 0.1], [0.0, 1.0]])
    perfect = evaluate(state, LabeledDataset(inputs, [0, 0, 1], "test"))
    assert (perfect.acc_overall, perfect.acc_base_classes, perfect.acc_new_classes) == (1.0, 1.0, 1.0)
    worst = evaluate(state, LabeledDataset(inputs, [1, 1, 0], "test"))
    assert (worst.acc_overall, worst.acc_base_classes, worst.acc_new_classes) == (0.0, 0.0, 0.0)


def test_evaluate_tallies_per_class_accuracy():
    state = _axis_state(3, (0, 1))
    inputs = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    report = evaluate(state, LabeledDataset(inputs, [0, 0, 2, 1], "test"))
    assert report.acc_overall == 0.75
    assert report.acc_base_classes == pytest.approx(2 / 3)
    assert report.acc_new_classes == 1.0
    assert report.per_class_acc == {0: 0.5, 1: 1.0, 2: 1.0}
    assert report.per_class_count == {0: 2, 1: 1, 2: 1}


def test_evaluate_is_invariant_to_test_order():
    stream = RandomStream(2, "test/evaluate-order")
    state = _axis_state(3, (0,))
    inputs = stream.normal((30, 3))
    labels = np.arange(30) % 3
    order = stream.permutation(30)
    first = evaluate(state, LabeledDataset(inputs, labels, "test"))
    second = evaluate(state, LabeledDataset(inputs[order], labels[order], "test"))
    assert first == second


def test_evaluate_base_session_has_no_new_accuracy():
    state = _axis_state(2, (0, 1), session_index=0)
    report = evaluate(state, LabeledDataset(np.eye(2), [0, 1], "test"))
    assert report.acc_new_classes is None


def test_evaluate_without_base_samples_reports_base_accuracy_as_absent():
    state = _axis_state(3, (0,))
    inputs = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    report = evaluate(state, LabeledDataset(inputs, [1, 2, 2], "test"))
    assert report.acc_base_classes is None
    assert report.acc_new_classes == pytest.approx(2 / 3)
    assert report.acc_overall == pytest.approx(2 / 3)
    summary = summarize([SessionReport(0, 0.8, 0.8), report])
    assert (summary.old, summary.new, summary.pd, summary.harmonic) == (None, None, None, None)
    assert summary.sessions == (0.8, pytest.approx(2 / 3))


def test_evaluate_rejects_empty_and_unknown_labels():
    state = _axis_state(2, (0,))
    with pytest.raises(MetricsError):
        evaluate(state, [])
    with pytest.raises(MetricsError, match="unknown"):
        evaluate(state, LabeledDataset(np.eye(2), [0, 5], "test"))


def _published_rows():
    ours = list(CE_SESSIONS[:-1]) + [0.5641]
    return result_rows(
        [("CE", 0, _session_reports(CE_SESSIONS)), ("ours", 0, _session_reports(ours))],
        baseline_method="CE",
    )


def test_sessions_layout_has_one_column_per_session_plus_summary():
    frame = results_frame(_published_rows(), "sessions")
    assert list(frame.columns) == [f"session_{i}" for i in range(9)] + ["avg", "final_improv"]


def test_text_table_shows_two_decimal_percentages():
    text = emit_table(_published_rows(), "text", "sessions")
    ce_line = next(line for line in text.splitlines() if line.startswith("CE"))
    assert "60.31" in ce_line
    assert "+7.02" in text


def test_results_csv_round_trips_exactly():
    rows = _published_rows()
    frame = read_results_csv(io.StringIO(emit_table(rows, "csv")))
    assert list(frame["method"]) == ["CE", "ours"]
    assert frame.loc[0, "session_8"] == 0.4939
    assert frame.loc[1, "final_improv"] == rows[1].summary.final_improv
    assert frame.loc[0, "avg"] == rows[0].summary.avg


def test_json_table_nests_method_and_seed():
    payload = json.loads(emit_table(_published_rows(), "json", "metrics"))
    assert set(payload) == {"CE", "ours"}
    assert payload["CE"]["0"]["base"] == 0.7565
    assert payload["CE"]["0"]["old"] is None


def test_unknown_baseline_and_mixed_lengths_are_rejected():
    with pytest.raises(MetricsError):
        result_rows([("CE", 0, _session_reports(CE_SESSIONS))], baseline_method="spl")
    rows = result_rows([("a", 0, _session_reports([0.5])), ("b", 0, _session_reports([0.5, 0.4]))])
    with pytest.raises(MetricsError):
        results_frame(rows)
    with pytest.raises(MetricsError):
        emit_table(rows[:1], "xml")


def test_emit_grid_formats():
    grid = np.array([[0.5, 0.25], [0.125, 1.0]])
    payload = json.loads(emit_grid(grid, (0.0, 0.01), (0.0, 0.1), fmt="json"))
    assert payload["gamma=0.01"]["alpha=0.1"] == 1.0
    text = emit_grid(grid, (0.0, 0.01), (0.0, 0.1))
    assert "gamma" in text and "50.00" in text and "12.50" in text
    csv = emit_grid(grid, (0.0, 0.01), (0.0, 0.1), fmt="csv")
    assert csv.splitlines()[0] == "gamma,alpha=0.0,alpha=0.1"
    parsed = pd.read_csv(io.StringIO(csv), index_col=0)
    np.testing.assert_array_equal(parsed.to_numpy(), grid)


def test_emit_grid_rejects_mismatched_labels():
    with pytest.raises(MetricsError):
        emit_grid(np.zeros((2, 2)), (0.0,), (0.0, 0.1))
