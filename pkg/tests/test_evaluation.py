import json
from fractions import Fraction

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import FOURTEEN_PRED, FOURTEEN_TRUE, LookupModel, constant_dataset
from resemote.data import CLASS_NAMES, EmotionClass
from resemote.evaluation import (
    REPORT_SCHEMA,
    ConfusionMatrix,
    EvalReport,
    class_accuracy_table,
    comparison_table,
    emit_confusion_csv,
    emit_report_json,
    evaluate,
    parse_confusion_csv,
    parse_report_json,
    report_json,
)


def hand_counts_fourteen():
    m = np.zeros((7, 7), dtype=np.int64)
    for c in range(7):
        m[c, c] = 2
    # the three planted mistakes: Disgust->Happy, Fear->Sad, Neutral->Angry
    for t, p in [(1, 3), (2, 4), (6, 0)]:
        m[t, t] -= 1
        m[t, p] += 1
    return m


def test_fourteen_sample_oracle():
    report = evaluate(LookupModel(FOURTEEN_PRED), constant_dataset(FOURTEEN_TRUE), batch_size=4)
    assert report.confusion.overall_fraction() == Fraction(11, 14)
    assert round(100 * report.overall_accuracy, 2) == 78.57
    np.testing.assert_array_equal(report.confusion.counts, hand_counts_fourteen())
    assert report.per_class_accuracy == [1.0, 0.5, 0.5, 1.0, 1.0, 1.0, 0.5]


def test_perfect_predictor():
    labels = [i % 7 for i in range(21)]
    report = evaluate(LookupModel(labels), constant_dataset(labels))
    np.testing.assert_array_equal(report.confusion.counts, 3 * np.eye(7, dtype=np.int64))
    assert report.overall_accuracy == 1.0


def test_constant_happy_predictor():
    labels = [i % 7 for i in range(70)]
    report = evaluate(LookupModel([3] * 70), constant_dataset(labels))
    assert report.confusion.overall_fraction() == Fraction(1, 7)
    assert report.per_class_accuracy == [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]


def test_absent_class_has_undefined_recall():
    report = evaluate(LookupModel([0, 1]), constant_dataset([0, 1]))
    assert report.per_class_accuracy[2] is None
    assert "–" in class_accuracy_table([report])


def test_argmax_ties_pick_lowest_code():
    class Flat(LookupModel):
        def __call__(self, x):
            from resemote.tensor import Tensor
            return Tensor(np.zeros((x.shape[0], 7)))

    report = evaluate(Flat([]), constant_dataset([0, 5]))
    assert report.confusion.counts[:, 0].sum() == 2


@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=80))
@settings(max_examples=60, deadline=None)
def test_confusion_invariants(pairs):
    y_true, y_pred = zip(*pairs)
    m = ConfusionMatrix.from_predictions(y_true, y_pred)
    assert m.total == len(pairs)
    assert m.row_sums == np.bincount(y_true, minlength=7).tolist()
    assert m.overall_fraction() == Fraction(sum(a == b for a, b in pairs), len(pairs))
    for c, r in enumerate(m.recalls()):
        assert r is None if m.row_sums[c] == 0 else r == m.counts[c, c] / m.row_sums[c]
    assert ConfusionMatrix.from_csv(m.to_csv()) == m


def test_confusion_merge_and_bad_indices():
    a = ConfusionMatrix.from_predictions([0, 1], [0, 0])
    b = ConfusionMatrix.from_predictions([1], [1])
    assert (a + b).counts[1].tolist() == [1, 1, 0, 0, 0, 0, 0]
    with pytest.raises(ValueError):
        ConfusionMatrix.from_predictions([7], [0])
    with pytest.raises(ValueError):
        ConfusionMatrix(np.zeros((2, 3), dtype=np.int64))


def test_identity_csv(tmp_path):
    m = ConfusionMatrix.from_predictions(range(7), range(7))
    emit_confusion_csv(m, tmp_path / "c.csv")
    text = (tmp_path / "c.csv").read_text()
    lines = text.splitlines()
    assert lines[0] == "true\\pred," + ",".join(CLASS_NAMES)
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        assert cells[0] == CLASS_NAMES[i]
        assert [int(v) for v in cells[1:]] == [int(i == j) for j in range(7)]
    emit_confusion_csv(parse_confusion_csv(tmp_path / "c.csv"), tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_bytes() == text.encode()


def test_report_json_round_trip_and_schema(tmp_path):
    report = evaluate(LookupModel(FOURTEEN_PRED), constant_dataset(FOURTEEN_TRUE), dataset="FER2013",
                      augmentation="Aug4", checkpoint="best.remn")
    emit_report_json(report, tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    jsonschema.validate(data, REPORT_SCHEMA)
    assert data["overall_accuracy_pct"] == 78.57
    again = parse_report_json(tmp_path / "r.json")
    assert report_json(again) == (tmp_path / "r.json").read_text()


def test_inconsistent_report_rejected():
    d = evaluate(LookupModel([0]), constant_dataset([0])).to_dict()
    d["overall_accuracy"] = 0.5
    with pytest.raises(ValueError):
        EvalReport.from_dict(d)


def test_empty_paths_rejected():
    m = ConfusionMatrix.from_predictions([0], [0])
    with pytest.raises(ValueError):
        emit_confusion_csv(m, "")
    with pytest.raises(ValueError):
        emit_report_json(EvalReport("x", "Original", m), "")


def _report_with_accuracy(dataset, aug, pct_hundredths):
    # 10000 samples so the accuracy is exactly pct_hundredths / 100 percent
    correct = pct_hundredths
    counts = np.zeros((7, 7), dtype=np.int64)
    counts[3, 3] = correct
    counts[3, 0] = 10000 - correct
    return EvalReport(dataset, aug, ConfusionMatrix(counts))


def test_comparison_table_renders_reference_row():
    values = {"Original": 7979, "Aug1": 8481, "Aug2": 9148, "Aug3": 9469, "Aug4": 9647}
    reports = [_report_with_accuracy("FER2013", a, v) for a, v in reversed(list(values.items()))]
    table = comparison_table(reports)
    assert [r[2] for r in table.rows] == ["79.79", "84.81", "91.48", "94.69", "96.47"]
    assert [r[1] for r in table.rows] == ["Original", "Aug1", "Aug2", "Aug3", "Aug4"]
    assert table.csv().splitlines()[1] == "FER2013,Original,79.79"


def test_comparison_table_single_and_ordering():
    assert len(comparison_table([_report_with_accuracy("RAF-DB", "Aug2", 9858)]).rows) == 1
    rows = comparison_table([_report_with_accuracy("X", "Aug3", 1), _report_with_accuracy("X", "Original", 2)]).rows
    assert [r[1] for r in rows] == ["Original", "Aug3"]
    with pytest.raises(ValueError):
        comparison_table([])


def test_empty_test_set_rejected():
    with pytest.raises(ValueError):
        evaluate(LookupModel([]), constant_dataset([]))
