import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crackseg.metrics import (
    METRIC_COLUMNS,
    ConfusionCounts,
    MetricReport,
    aggregate_report,
    compute_metrics,
    confusion_counts,
    format_table,
    metric_row,
    write_records,
)


def pixel_loop_counts(pred, target, threshold=0.5):
    """Brute-force oracle: one pixel at a time."""
    tp = fp = fn = tn = 0
    for p, t in zip(np.asarray(pred).ravel(), np.asarray(target).ravel()):
        hard = p > threshold
        truth = t > 0.5
        if hard and truth:
            tp += 1
        elif hard and not truth:
            fp += 1
        elif not hard and truth:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def loop_metrics(c: ConfusionCounts):
    """Oracle ratios computed directly from the counts."""
    empty = c.tp + c.fp + c.fn == 0

    def ratio(num, den):
        return num / den if den > 0 else (1.0 if empty else 0.0)

    return (
        (c.tp + c.tn) / c.total,
        ratio(c.tp, c.tp + c.fp),
        ratio(c.tp, c.tp + c.fn),
        ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        ratio(c.tp, c.tp + c.fp + c.fn),
    )


class TestConfusionCounts:
    def test_perfect_prediction_has_no_errors(self):
        target = np.array([[1.0, 0.0], [0.0, 1.0]])
        c = confusion_counts(target, target, 0.5)
        assert (c.fp, c.fn) == (0, 0)
        assert c.tp == 2 and c.tn == 2

    def test_all_positive_against_all_negative(self):
        c = confusion_counts(np.ones((3, 3)), np.zeros((3, 3)), 0.5)
        assert (c.tp, c.fp, c.fn, c.tn) == (0, 9, 0, 0)

    def test_three_by_three_case_matches_loop_oracle(self):
        pred = np.array([[1, 1, 0], [0, 0, 0], [1, 0, 0]], dtype=float)
        target = np.array([[1, 0, 0], [0, 0, 0], [1, 1, 0]], dtype=float)
        oracle = pixel_loop_counts(pred, target)
        assert oracle == ConfusionCounts(tp=2, fp=1, fn=1, tn=5)
        assert confusion_counts(pred, target, 0.5) == oracle

    def test_counts_merge_additively(self):
        a = ConfusionCounts(1, 2, 3, 4)
        b = ConfusionCounts(10, 20, 30, 40)
        assert a + b == ConfusionCounts(11, 22, 33, 44)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError, match="threshold"):
            confusion_counts(np.ones(4), np.ones(4), 1.5)
        with pytest.raises(ValueError, match="shape"):
            confusion_counts(np.ones(4), np.ones(5))
        with pytest.raises(ValueError, match="non-negative"):
            ConfusionCounts(-1, 0, 0, 0)


class TestComputeMetrics:
    def test_direct_substitution(self):
        r = compute_metrics(ConfusionCounts(2, 1, 1, 5))
        assert r.accuracy == pytest.approx(7 / 9, abs=1e-12)
        assert r.precision == pytest.approx(2 / 3, abs=1e-12)
        assert r.recall == pytest.approx(2 / 3, abs=1e-12)
        assert r.f1 == pytest.approx(2 / 3, abs=1e-12)
        assert r.iou == pytest.approx(0.5, abs=1e-12)

    def test_perfect_prediction(self):
        r = compute_metrics(ConfusionCounts(tp=5, fp=0, fn=0, tn=4))
        assert r.values() == (1.0, 1.0, 1.0, 1.0, 1.0)

    def test_both_empty_convention(self):
        r = compute_metrics(ConfusionCounts(tp=0, fp=0, fn=0, tn=9))
        assert r.values() == (1.0, 1.0, 1.0, 1.0, 1.0)

    def test_empty_prediction_nonempty_target(self):
        r = compute_metrics(ConfusionCounts(tp=0, fp=0, fn=3, tn=6))
        assert r.precision == 0.0 and r.recall == 0.0 and r.f1 == 0.0 and r.iou == 0.0

    def test_nonempty_prediction_empty_target(self):
        r = compute_metrics(ConfusionCounts(tp=0, fp=3, fn=0, tn=6))
        assert r.precision == 0.0 and r.recall == 0.0

    def test_zero_total_rejected(self):
        with pytest.raises(ValueError, match="no pixels"):
            compute_metrics(ConfusionCounts())

    @given(
        tp=st.integers(0, 10_000),
        fp=st.integers(0, 10_000),
        fn=st.integers(0, 10_000),
        tn=st.integers(0, 10_000),
    )
    @settings(max_examples=200, deadline=None)
    def test_f1_iou_identity_and_bounds(self, tp, fp, fn, tn):
        if tp + fp + fn == 0 or tp + fp + fn + tn == 0:
            return
        r = compute_metrics(ConfusionCounts(tp, fp, fn, tn))
        assert abs(r.f1 - 2 * r.iou / (1 + r.iou)) <= 1e-12
        assert min(r.precision, r.recall) - 1e-12 <= r.f1 <= max(r.precision, r.recall) + 1e-12


def test_metrics_equal_pixel_loop_oracle_on_random_masks():
    rng = np.random.default_rng(42)
    for _ in range(100):
        pred = rng.random((16, 16))
        target = (rng.random((16, 16)) > 0.7).astype(float)
        counts = confusion_counts(pred, target, 0.5)
        assert counts == pixel_loop_counts(pred, target, 0.5)
        assert compute_metrics(counts).values() == loop_metrics(counts)


class TestAggregate:
    def test_single_element_equals_compute(self):
        c = ConfusionCounts(3, 1, 2, 10)
        assert aggregate_report([c]).values() == compute_metrics(c).values()

    def test_scaling_all_counts_keeps_ratios(self):
        c = ConfusionCounts(3, 1, 2, 10)
        assert aggregate_report([c, c]).values() == compute_metrics(c).values()

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="aggregate"):
            aggregate_report([])

    @given(cut=st.integers(1, 15))
    @settings(max_examples=25, deadline=None)
    def test_invariant_to_batch_partitioning(self, cut):
        rng = np.random.default_rng(3)
        pred = rng.random((16, 16))
        target = (rng.random((16, 16)) > 0.7).astype(float)
        whole = aggregate_report([confusion_counts(pred, target)])
        parts = [
            confusion_counts(pred[:cut], target[:cut]),
            confusion_counts(pred[cut:], target[cut:]),
        ]
        assert aggregate_report(parts).values() == whole.values()


class TestRendering:
    def test_metric_row_three_decimals(self):
        # the reported headline row renders with exactly these cells
        report = MetricReport(0.971, 0.804, 0.744, 0.770, 0.630)
        assert metric_row(report) == "0.971 0.804 0.744 0.770 0.630"

    def test_table_has_five_metric_columns(self):
        r = compute_metrics(ConfusionCounts(2, 1, 1, 5))
        table = format_table([("fused", r)])
        header, row = table.splitlines()
        assert header.split()[1:] == list(METRIC_COLUMNS)
        assert len(row.split()) == 6  # label + five metrics
        assert row.split()[1:] == ["0.778", "0.667", "0.667", "0.667", "0.500"]

    def test_write_records_jsonl(self, tmp_path):
        r = compute_metrics(ConfusionCounts(2, 1, 1, 5), n_images=4)
        path = tmp_path / "records.jsonl"
        write_records(path, [("a", r), ("b", r)], split="test")
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 2
        first = json.loads(lines[0])
        assert first["label"] == "a"
        assert first["split"] == "test"
        assert set(METRIC_COLUMNS) <= set(first)
