import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from afnas.data import LabeledWindow
from afnas.errors import ContractError, UndefinedMetricError
from afnas.metrics import (
    ConfusionCounts,
    confusion,
    evaluate,
    format_report,
    noise_specificity,
    parse_report,
    sensitivity,
    specificity,
)


def win(label):
    return LabeledWindow(np.zeros((4, 2)), 1.0, label, "s")


counts = st.builds(ConfusionCounts, *(st.integers(0, 1000) for _ in range(4)))


def test_examples():
    assert sensitivity(ConfusionCounts(tp=45, fn=5)) == 0.9
    assert sensitivity(ConfusionCounts(tp=0, fn=10)) == 0.0
    assert specificity(ConfusionCounts(tn=98, fp=2)) == 0.98


def test_undefined():
    with pytest.raises(UndefinedMetricError):
        noise_specificity(ConfusionCounts())
    with pytest.raises(UndefinedMetricError):
        sensitivity(ConfusionCounts(tn=3))
    with pytest.raises(UndefinedMetricError):
        specificity(ConfusionCounts(tp=3))


def test_negative_counts_rejected():
    with pytest.raises(ContractError):
        ConfusionCounts(tp=-1)


@given(counts, st.integers(0, 50), st.integers(0, 50))
def test_rates_bounded_and_independent(c, a, b):
    if c.tp + c.fn:
        s = sensitivity(c)
        assert 0 <= s <= 1
        assert sensitivity(ConfusionCounts(c.tp, c.fp + a, c.tn + b, c.fn)) == s
    if c.tn + c.fp:
        s = specificity(c)
        assert 0 <= s <= 1
        assert specificity(ConfusionCounts(c.tp + a, c.fp, c.tn, c.fn + b)) == s


def test_confusion():
    c = confusion([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert c == ConfusionCounts(tp=2, fp=1, tn=1, fn=1)


def test_evaluate_perfect_and_all_negative():
    ws = [win("AF"), win("NORMAL"), win("NOISE"), win("AF"), win("NOISE")]
    truth = np.array([1.0, -1, -1, 1, -1])
    overall, noise = evaluate(None, ws, logits=truth)
    assert sensitivity(overall) == specificity(overall) == noise_specificity(noise) == 1.0
    assert overall.total == 3 and noise == ConfusionCounts(tn=2)
    overall, noise = evaluate(None, ws, logits=-np.ones(5))
    assert sensitivity(overall) == 0.0 and specificity(overall) == 1.0


def test_evaluate_with_callable_and_threshold():
    ws = [win("AF"), win("NORMAL")]
    # a logit of exactly zero is a negative decision
    overall, _ = evaluate(lambda xb: np.zeros(len(xb)), ws)
    assert overall == ConfusionCounts(tn=1, fn=1)


def test_evaluate_empty():
    with pytest.raises(ContractError):
        evaluate(None, [], logits=[])


def test_report_round_trip():
    text = format_report(ConfusionCounts(tp=45, fn=5, tn=98, fp=2), ConfusionCounts())
    parsed = parse_report(text)
    assert parsed["sensitivity"] == 0.9 and parsed["specificity"] == 0.98
    assert parsed["noise_specificity"] is None and parsed["tp"] == 45
