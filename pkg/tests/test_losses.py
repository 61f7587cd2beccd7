import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fairgen.losses import (ce_from_logits_grad, ce_loss, combined_loss, combined_loss_grad, gdro_loss, softmax,
                            supcon_loss, supcon_loss_grad)

from oracles import finite_difference, rel_error, supcon_brute


def test_ce_uniform_is_ln2():
    assert ce_loss(np.full((5, 2), 0.5), [0, 1, 1, 0, 1]) == pytest.approx(math.log(2), abs=1e-9)


def test_ce_clamps_zero_probability(caplog):
    caplog.set_level(logging.WARNING, logger="fairgen")
    v = ce_loss(np.array([[1.0, 0.0]]), [1])
    assert v == pytest.approx(-math.log(1e-12))
    assert "clamped" in caplog.text


def test_ce_logits_matches_probs():
    rng = np.random.default_rng(0)
    logits, y = rng.normal(size=(7, 3)), rng.integers(0, 3, 7)
    assert ce_from_logits_grad(logits, y)[0] == pytest.approx(ce_loss(softmax(logits), y), abs=1e-12)


def test_supcon_hand_value():
    # identical features: each anchor has one positive and two negatives, term = log(2e) - 1
    assert supcon_loss(np.ones((4, 3)), [0, 0, 1, 1]) == pytest.approx(4 * math.log(2), abs=1e-12)


def test_supcon_one_dimensional():
    # 1-d features normalise to +-1: per anchor one positive at s=1, two negatives at s=-1,
    # term = log(2 e^-1) - 1
    f = np.array([1.0, 2.0, -1.0, -3.0])
    assert supcon_loss(f, [0, 0, 1, 1]) == pytest.approx(4 * (math.log(2) - 2), abs=1e-12)


@pytest.mark.parametrize("variant", ["negatives", "standard"])
def test_supcon_matches_brute_force(variant):
    rng = np.random.default_rng(42)
    for _ in range(100):
        b, d = rng.integers(2, 17), rng.integers(1, 9)
        f = rng.normal(size=(b, d))
        y = rng.integers(0, 3, b)
        tau = float(rng.uniform(0.2, 2.0))
        assert supcon_loss(f, y, tau, variant) == pytest.approx(supcon_brute(f, y, tau, variant), abs=1e-9)


def test_supcon_without_pairs_warns(caplog):
    caplog.set_level(logging.WARNING, logger="fairgen")
    assert supcon_loss(np.random.default_rng(0).normal(size=(3, 2)), [0, 1, 2]) == 0.0
    assert "loss is 0" in caplog.text


def test_supcon_mean_reduction():
    rng = np.random.default_rng(1)
    f, y = rng.normal(size=(6, 4)), [0, 0, 0, 1, 1, 2]  # anchor of class 2 has no positive
    assert supcon_loss(f, y, reduction="mean") == pytest.approx(supcon_loss(f, y) / 5)


@pytest.mark.parametrize("variant", ["negatives", "standard"])
@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_combined_loss_gradients(variant, reduction):
    rng = np.random.default_rng(7)
    for _ in range(5):
        b = 10
        logits, feats = rng.normal(size=(b, 3)), rng.normal(size=(b, 5))
        y = rng.integers(0, 3, b)
        kw = dict(beta=0.3, tau=0.7, variant=variant, reduction=reduction)
        out = combined_loss_grad(logits, feats, y, **kw)
        assert rel_error(out["d_logits"], finite_difference(lambda z: combined_loss(z, feats, y, **kw), logits)) < 1e-4
        assert rel_error(out["d_features"], finite_difference(lambda z: combined_loss(logits, z, y, **kw), feats)) < 1e-4


def test_combined_loss_reads_config():
    class Cfg:
        beta, tau = 1.0, 1.0
    rng = np.random.default_rng(0)
    logits, feats, y = rng.normal(size=(4, 2)), rng.normal(size=(4, 3)), [0, 1, 0, 1]
    assert combined_loss(logits, feats, y, Cfg()) == pytest.approx(ce_from_logits_grad(logits, y)[0])


def test_gdro_two_group_closed_form():
    loss, q = gdro_loss({"a": 1.0, "b": 0.0}, {"a": 0.5, "b": 0.5}, eta=1.0)
    e = math.e
    assert q["a"] == pytest.approx(e / (e + 1), abs=1e-12)
    assert q["b"] == pytest.approx(1 / (e + 1), abs=1e-12)
    assert loss == pytest.approx(e / (e + 1), abs=1e-12)


@given(st.lists(st.floats(0, 50), min_size=1, max_size=6), st.floats(0, 10))
def test_gdro_weights_form_a_distribution(losses, eta):
    keys = list(range(len(losses)))
    _, q = gdro_loss(dict(zip(keys, losses)), {k: 1 / len(keys) for k in keys}, eta)
    assert sum(q.values()) == pytest.approx(1.0)
    top = max(keys, key=lambda k: losses[k])
    assert q[top] == pytest.approx(max(q.values()))


def test_gdro_rejects_nan():
    with pytest.raises(ValueError):
        gdro_loss({"a": float("nan")}, {"a": 1.0}, 0.1)
