import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2d import nets
from m2d.baselines import BaselineConfig, msp_from_logits, msp_score, odin_score


def test_msp_examples():
    assert msp_from_logits([[1000.0, 0.0]])[0] == pytest.approx(1.0)
    assert msp_from_logits([[0.0, 0.0, 0.0, 0.0]], temperature=7.0)[0] == 0.25
    assert msp_from_logits([[2.0, 1.0]])[0] == pytest.approx(math.exp(2) / (math.exp(2) + math.exp(1)), rel=1e-12)
    assert msp_from_logits([[2.0, 1.0]])[0] == pytest.approx(0.7311, abs=1e-4)


@settings(max_examples=50)
@given(st.integers(2, 10), st.floats(-1e3, 1e3), st.integers(0, 2**31))
def test_msp_bounds_and_shift_invariance(k, shift, seed):
    logits = np.random.default_rng(seed).uniform(-30, 30, (6, k))
    p = msp_from_logits(logits)
    assert np.all(p > 0) and np.all(p <= 1) and np.all(p >= 1.0 / k - 1e-15)
    np.testing.assert_allclose(msp_from_logits(logits + shift), p, atol=1e-12, rtol=0)


def test_high_temperature_tends_to_uniform():
    logits = np.random.default_rng(0).uniform(-10, 10, (20, 5))
    np.testing.assert_allclose(msp_from_logits(logits, 1e6), 0.2, atol=1e-4)


def test_odin_zero_epsilon_reduces_to_msp():
    clf = nets.build(nets.mlp([3, 8, 4]), 2)
    x = np.random.default_rng(1).normal(size=(15, 3))
    for t in (1.0, 1000.0):
        got = odin_score(clf, x, BaselineConfig(temperature=t, epsilon=0.0))
        assert got.tobytes() == msp_score(clf, x, t).tobytes()


def test_odin_perturbation_raises_score():
    clf = nets.build(nets.mlp([3, 8, 4]), 2)
    x = np.random.default_rng(1).normal(size=(50, 3))
    moved = odin_score(clf, x, BaselineConfig(temperature=1.0, epsilon=0.01))
    assert moved.mean() > msp_score(clf, x).mean()


def test_odin_deterministic(blob_classifier):
    clf, splits = blob_classifier
    a = odin_score(clf, splits["test"].features)
    b = odin_score(clf, splits["test"].features)
    assert a.tobytes() == b.tobytes()


def test_config_validation():
    with pytest.raises(ValueError):
        BaselineConfig(temperature=0.0)
    with pytest.raises(ValueError):
        BaselineConfig(epsilon=-1.0)
    with pytest.raises(ValueError):
        msp_score(nets.build(nets.mlp([2, 2]), 0), np.zeros((1, 2)), temperature=-1)
