import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualmap.decision import (ActivationSummary, DecisionParams, decide,
                              posterior_m, risk, threshold_for_count)


def test_threshold_formula_paper_values():
    assert DecisionParams(12, 1, 1).threshold == 0.2
    assert DecisionParams(7, 1, 1).threshold == pytest.approx(0.3)


def test_threshold_limit_large_k1():
    assert DecisionParams(1e12, 1, 1).threshold == pytest.approx(0.0, abs=1e-9)


def test_invalid_penalties():
    with pytest.raises(ValueError):
        DecisionParams(-1, 0, 0)


def test_out_of_range_threshold_warns():
    with pytest.warns(UserWarning):
        DecisionParams(0, 1, 2.5)  # threshold 1.5 > 1


def test_posterior_m_single_active_voxel():
    # Draws constant at the posterior sd at one voxel, zero elsewhere:
    # f_bar = 1 there, 0 elsewhere. Use draws with matching sd structure.
    rng = np.random.default_rng(0)
    n = 4000
    mu = np.zeros((n, 3))
    mu[:, 0] = 10.0 + rng.normal(size=n)
    mu[:, 1] = rng.normal(size=n) * 1e-3
    mu[:, 2] = rng.normal(size=n) * 1e-3
    m, f_bar = posterior_m(mu)
    assert f_bar[0] > 0.95
    # Noise voxels: |N(0,1)| magnitudes over a max near 10 average ~ 0.08.
    assert f_bar[1] < 0.15 and f_bar[2] < 0.15
    assert m[0] == pytest.approx(10.0, rel=0.1)


def test_posterior_m_scale_invariance():
    rng = np.random.default_rng(1)
    mu = rng.normal(size=(200, 10))
    _, f1 = posterior_m(mu)
    _, f2 = posterior_m(5.3 * mu)
    assert np.allclose(f1, f2)


def test_posterior_m_brute_force_agreement():
    rng = np.random.default_rng(2)
    mu = rng.normal(size=(57, 8)) + rng.normal(size=8)
    m, f_bar = posterior_m(mu)
    sd = mu.std(axis=0, ddof=1)
    mg = np.abs(mu) / sd
    f = mg / mg.max(axis=1, keepdims=True)
    assert np.allclose(f_bar, f.mean(axis=0))
    assert np.allclose(m, np.abs(mu.mean(axis=0)) / sd)


def test_posterior_m_zero_sd_warns():
    mu = np.ones((10, 2))
    mu[:, 1] = np.arange(10)
    with pytest.warns(UserWarning, match="zero posterior sd"):
        m, f_bar = posterior_m(mu)
    assert f_bar[0] == 0.0


def test_posterior_m_plug_in_variant():
    rng = np.random.default_rng(3)
    mu = rng.normal(size=(100, 5)) + [0, 1, 2, 3, 4]
    m, f_bar = posterior_m(mu, plug_in=True)
    assert f_bar.max() == pytest.approx(1.0)
    assert np.allclose(f_bar, m / m.max())


def test_posterior_m_requires_two_draws():
    with pytest.raises(ValueError):
        posterior_m(np.ones((1, 3)))


def test_decide_threshold_and_bounds():
    f = np.array([0.1, 0.2, 0.3])
    s = decide(f, f, DecisionParams(12, 1, 1))
    assert s.threshold == 0.2
    assert np.array_equal(s.delta, [False, True, True])  # ties included


def test_decide_is_exhaustive_risk_minimizer():
    rng = np.random.default_rng(4)
    grids = list(itertools.product([0, 1], repeat=10))
    for _ in range(50):
        f = rng.uniform(size=10)
        params = DecisionParams(rng.uniform(0, 15), rng.uniform(0, 3),
                                rng.uniform(0, 2))
        s = decide(f, f, params)
        r_star = risk(f, s.delta, params)
        best = min(risk(f, np.array(d), params) for d in grids)
        assert r_star <= best + 1e-12


def test_risk_trivial_values():
    n = 6
    f = np.ones(n)
    assert risk(f, np.ones(n), DecisionParams(5, 0, 0)) == pytest.approx(-n)
    f = np.zeros(n)
    assert risk(f, np.zeros(n), DecisionParams(5, 3, 2)) == pytest.approx(-n)


def test_delta_monotone_in_f_bar():
    rng = np.random.default_rng(5)
    f = rng.uniform(size=20)
    params = DecisionParams(12, 1, 1)
    s = decide(f, f, params)
    f2 = f.copy()
    f2[s.delta] = np.minimum(f2[s.delta] + 0.1, 1.0)
    s2 = decide(f2, f2, params)
    assert np.all(s2.delta[s.delta])


def test_threshold_for_count_extremes():
    f = np.random.default_rng(6).uniform(size=30)
    thr, n = threshold_for_count(f, 0)
    assert n == 0 and thr > f.max()
    thr, n = threshold_for_count(f, 30)
    assert n == 30 and thr == 0.0


def test_threshold_for_count_exact_when_distinct():
    f = np.linspace(0, 1, 50)
    for target in (1, 17, 49):
        thr, n = threshold_for_count(f, target)
        assert n == target
        assert np.count_nonzero(f >= thr) == target


def test_threshold_for_count_ties_included():
    f = np.array([0.9, 0.5, 0.5, 0.1])
    thr, n = threshold_for_count(f, 2)
    assert thr == 0.5
    assert n == 3  # both tied voxels included


@given(st.integers(0, 40))
@settings(max_examples=25, deadline=None)
def test_threshold_for_count_monotone(n):
    f = np.random.default_rng(7).uniform(size=40)
    thr_n, _ = threshold_for_count(f, n)
    if n < 40:
        thr_n1, _ = threshold_for_count(f, n + 1)
        assert thr_n1 <= thr_n


def test_threshold_for_count_range_checked():
    with pytest.raises(ValueError):
        threshold_for_count(np.ones(3), 4)


def test_summary_csv(tmp_path):
    s = ActivationSummary(np.array([1.0, 2.0]), np.array([0.1, 0.9]),
                          np.array([False, True]), 0.2)
    path = tmp_path / "d.csv"
    s.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "voxel,f_bar,m,delta"
    assert lines[2].endswith(",1")
