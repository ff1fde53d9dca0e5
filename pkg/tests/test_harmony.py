import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from harmask.errors import ConfigError, DegenerateLossError
from harmask.harmony import (agreement_score, avg_harmony_metric, gradient_bundle, harmony_score,
                             importance, importance_fisher, importance_magnitude, masked_gradient)
from harmask.model import build_layout, loss, loss_and_grad
from harmask.params import apply_mask


def test_masked_gradient_identity_and_zero(tiny_cfg, tiny_theta, tiny_batch):
    P = tiny_theta.size
    lm, gm = masked_gradient(tiny_theta, tiny_cfg, np.ones(P, bool), tiny_batch)
    l0, g0 = loss_and_grad(tiny_theta, tiny_cfg, tiny_batch)
    assert lm == l0 and np.array_equal(gm, g0)
    lz, gz = masked_gradient(tiny_theta, tiny_cfg, np.zeros(P, bool), tiny_batch)
    assert np.all(gz == 0.0)
    assert lz == loss(np.zeros(P), tiny_cfg, tiny_batch)


def test_masked_gradient_finite_differences(tiny_cfg, tiny_theta, tiny_batch):
    rng = np.random.default_rng(0)
    mask = rng.random(tiny_theta.size) < 0.6
    _, g = masked_gradient(tiny_theta, tiny_cfg, mask, tiny_batch)
    assert np.all(g[~mask] == 0.0)
    h = 1e-5
    f = lambda th: loss(apply_mask(th, mask), tiny_cfg, tiny_batch)
    for i in rng.choice(np.flatnonzero(mask), size=60, replace=False):
        tp, tm = tiny_theta.copy(), tiny_theta.copy()
        tp[i] += h
        tm[i] -= h
        num = (f(tp) - f(tm)) / (2 * h)
        # central differences cannot resolve much below 1e-10 in absolute terms
        assert abs(num - g[i]) <= 1e-5 * max(abs(num) + abs(g[i]), 1e-5)


def test_bundle_threads_match(tiny_cfg, tiny_theta, small_datasets):
    from harmask.data import probe_batches
    batches = probe_batches(small_datasets, 3, 2, 4, 0)
    rng = np.random.default_rng(1)
    masks = {t: rng.random(tiny_theta.size) < 0.8 for t in batches}
    a = gradient_bundle(tiny_theta, tiny_cfg, masks, batches, threads=1)
    b = gradient_bundle(tiny_theta, tiny_cfg, masks, batches, threads=3)
    assert np.array_equal(a.average, b.average)
    expected = sum(a.per_task_masked[t] for t in sorted(masks)) / len(masks)
    np.testing.assert_array_equal(a.average, expected)


def test_agreement_examples():
    np.testing.assert_array_equal(agreement_score([1, -1], [1, 0.5]), [1, -0.5])
    assert np.all(agreement_score([3, -2], [0, 0]) == 0)
    g = np.array([1.0, -2.0, 0.5])
    assert np.all(agreement_score(g, g) >= 0)


def test_importance_examples():
    np.testing.assert_array_equal(importance_magnitude(np.array([-2.0, 3.0]), np.ones(2, bool)),
                                  [2, 3])
    np.testing.assert_array_equal(importance_magnitude(np.array([-2.0, 3.0]),
                                                       np.array([0, 1], bool)), [0, 3])
    np.testing.assert_array_equal(importance_fisher(np.array([2.0, 0.0]), 2.0, np.ones(2, bool)),
                                  [1, 0])
    assert np.all(importance_fisher(np.array([2.0, 1.0]), 2.0, np.zeros(2, bool)) == 0)
    with pytest.raises(DegenerateLossError):
        importance_fisher(np.ones(2), 0.0, np.ones(2, bool))


def test_importance_fisher_falls_back(caplog):
    theta = np.array([-1.0, 2.0])
    with caplog.at_level(logging.WARNING):
        out = importance("fisher", theta, np.ones(2, bool), np.ones(2), 0.0)
    np.testing.assert_array_equal(out, [1, 2])
    assert "magnitude" in caplog.text
    with pytest.raises(ConfigError):
        importance("entropy", theta, np.ones(2, bool), np.ones(2), 1.0)


def test_harmony_score_examples():
    np.testing.assert_array_equal(harmony_score([1, 2], [3, 4], 0.0, np.ones(2, bool)), [1, 2])
    np.testing.assert_array_equal(harmony_score([1, 2], [3, 4], 10.0, np.array([1, 0], bool)),
                                  [31, np.inf])
    assert np.all(np.isinf(harmony_score([1, 2], [3, 4], 1.0, np.zeros(2, bool))))
    with pytest.raises(ConfigError):
        harmony_score([1], [1], -1.0, np.ones(1, bool))


def test_metric_examples():
    assert avg_harmony_metric([np.array([0.3, -2.0])] * 3) == 1.0
    assert avg_harmony_metric([np.array([1.0]), np.array([-1.0])]) == 0.0


def test_metric_two_task_hand_example():
    g1, g2 = np.array([1.0, 1.0]), np.array([1.0, -1.0])
    avg = (g1 + g2) / 2
    # hand summation over all (task, coordinate) terms
    terms = []
    for g in (g1, g2):
        for j in range(2):
            p = g[j] * avg[j]
            terms.append(0.0 if p == 0 else np.sign(p))
    assert terms == [1.0, 0.0, 1.0, 0.0]
    assert avg_harmony_metric([g1, g2]) == 0.5


gradient_sets = st.integers(1, 5).flatmap(lambda n: st.integers(1, 30).flatmap(
    lambda k: st.lists(st.lists(st.floats(-1e3, 1e3), min_size=k, max_size=k),
                       min_size=n, max_size=n)))


@settings(max_examples=80, deadline=None)
@given(gs=gradient_sets)
def test_metric_in_range(gs):
    m = avg_harmony_metric([np.array(g) for g in gs])
    assert -1.0 <= m <= 1.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(0.01, 100))
def test_metric_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    gs = [rng.normal(size=12) for _ in range(3)]
    a = avg_harmony_metric(gs, epsilon=1e-300)
    b = avg_harmony_metric([c * g for g in gs], epsilon=1e-300)
    assert a == pytest.approx(b, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_agreement_sums_to_dot(seed):
    rng = np.random.default_rng(seed)
    g, avg = rng.normal(size=20), rng.normal(size=20)
    assert agreement_score(g, avg).sum() == pytest.approx(float(g @ avg), rel=1e-12, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.floats(0, 100))
def test_importance_non_negative(seed, lam):
    rng = np.random.default_rng(seed)
    th, g = rng.normal(size=15), rng.normal(size=15)
    m = rng.random(15) < 0.5
    assert np.all(importance_magnitude(th, m) >= 0)
    assert np.all(importance_fisher(g, 0.3, m) >= 0)
    h = harmony_score(g * th, importance_magnitude(th, m), lam, m)
    assert np.all(np.isinf(h[~m])) and np.all(np.isfinite(h[m]))
