import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fairgen.errors import EvaluationError
from fairgen.groups import GroupKey
from fairgen.metrics import GroupMetrics, dump_metrics, emit_report, evaluate_predictions, parse_report


def test_wga_aga_and_sample_accuracy(small_toy):
    test = small_toy.split("test")
    y = test.class_indices()
    pred = y.copy()
    sq_cool = np.where(test.group_indices() == test.all_groups().index(GroupKey("square", "cool")))[0]
    pred[sq_cool[:10]] = 1 - pred[sq_cool[:10]]  # half of one group wrong
    m = evaluate_predictions(pred, test)
    assert m.per_group_accuracy[GroupKey("square", "cool")] == 0.5
    assert m.wga == 0.5
    assert m.aga == pytest.approx(3.5 / 4)
    assert m.sample_accuracy == pytest.approx(70 / 80)


def test_unweighted_mean_differs_from_sample_accuracy():
    m = GroupMetrics.from_accuracies({GroupKey("a", "x"): 1.0, GroupKey("a", "y"): 0.0},
                                     {GroupKey("a", "x"): 90, GroupKey("a", "y"): 10})
    assert (m.wga, m.aga, m.sample_accuracy) == (0.0, 0.5, 0.9)


def test_empty_group_is_an_error(small_toy):
    test = small_toy.split("test")
    part = test.derive([it for it in test.items if it.group != GroupKey("cross", "warm")])
    with pytest.raises(EvaluationError):
        evaluate_predictions(part.class_indices(), part)
    with pytest.raises(EvaluationError):
        evaluate_predictions([], test.derive([]))


def test_dump_is_stable(tmp_path):
    m = GroupMetrics.from_accuracies({GroupKey("a", "x"): 0.25, GroupKey("b", "y"): 1.0},
                                     {GroupKey("a", "x"): 4, GroupKey("b", "y"): 4})
    a = dump_metrics(m, tmp_path / "a.json", {"seed": 1}).read_bytes()
    b = dump_metrics(m, tmp_path / "b.json", {"seed": 1}).read_bytes()
    assert a == b
    assert GroupMetrics.from_dict(json.loads(a)["metrics"]) == m


def _m(accs):
    keys = [GroupKey("a", "x"), GroupKey("a", "y")]
    return GroupMetrics.from_accuracies(dict(zip(keys, accs)), dict.fromkeys(keys, 10))


def test_report_mean_and_std():
    text = emit_report([("ERM", _m([0.5, 1.0])), ("ERM", _m([0.7, 1.0])), ("ours", _m([0.9, 0.9]))])
    lines = text.splitlines()
    assert lines[0] == "| method | seeds | WGA | AGA | a/x | a/y |"
    assert lines[2] == "| ERM | 2 | 60.00±10.00 | 80.00±5.00 | 60.00±10.00 | 100.00±0.00 |"
    assert lines[3] == "| ours | 1 | 90.00 | 90.00 | 90.00 | 90.00 |"


@pytest.mark.parametrize("fmt", ["csv", "markdown"])
@given(st.lists(st.tuples(st.sampled_from(["A", "B", "C"]), st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=8))
def test_report_round_trip(fmt, rows):
    runs = [(lbl, _m([a / 20, b / 20])) for lbl, a, b in rows]
    parsed = parse_report(emit_report(runs, fmt), fmt)
    for lbl in {r[0] for r in rows}:
        ms = [m for l2, m in runs if l2 == lbl]
        assert parsed[lbl]["WGA"][0] == pytest.approx(np.mean([m.wga for m in ms]), abs=5e-5)
        assert parsed[lbl]["WGA"][1] == pytest.approx(np.std([m.wga for m in ms]), abs=5e-5)


def test_unknown_format():
    with pytest.raises(ValueError):
        emit_report([("x", _m([1, 1]))], "html")
