import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from wigem import simulate
from wigem.ingest import OccupationalGroup, SurveyRecord
from wigem.simulate import (InfeasibleMoments, beta_params, clamp_sigma, clamp_tally, offset_members,
                            simulate_group, standardize_bounded)


def max_sample_sd(n: int, mean: float, upper: float) -> float:
    """Largest n-1 sample sd of n points in [0, upper] with the given mean.

    Sum of squares is convex, so the maximum sits at a vertex of the
    feasible polytope: k points at the upper bound, at most one in between,
    the rest at zero.
    """
    total = n * mean
    k = min(n - 1, math.floor(total / upper))
    sample = [upper] * k + [total - k * upper] + [0.0] * (n - k - 1)
    return float(np.std(sample, ddof=1))


def group(values, ses=None, occ="Job", ag=1):
    ses = ses or [None] * len(values)
    return OccupationalGroup((occ, ag), [SurveyRecord(occ, "111111", ag, "E", f"L{i}", v, s)
                                         for i, (v, s) in enumerate(zip(values, ses))])


def test_clamp_sigma():
    assert clamp_sigma(0.5, 0.3) == pytest.approx(0.2375)
    assert clamp_sigma(0.5, 0.1) == 0.1


def test_beta_params_moment_matching():
    assert beta_params(0.5, math.sqrt(0.05)) == pytest.approx((2.0, 2.0))
    assert beta_params(0.2, 0.2) == pytest.approx((0.6, 2.4))


def test_beta_params_infeasible():
    with pytest.raises(InfeasibleMoments):
        beta_params(0.5, 0.5)
    with pytest.raises(InfeasibleMoments):
        beta_params(0.0, 0.1)


def test_offset_thought_experiment():
    out = offset_members(np.array([0.95, 0.02, 0.03]), 0, 0.98)
    assert out == pytest.approx([0.98, 0.008, 0.012])
    assert math.fsum(out) == pytest.approx(1.0, abs=1e-15)


def test_offset_leaves_missing_members_alone():
    out = offset_members(np.array([0.5, np.nan, 0.2]), 0, np.array([0.4, 0.6]))
    assert np.isnan(out[1]).all()
    assert out[2] == pytest.approx([0.3, 0.1])


def test_shock_reproduces_moments_and_sums():
    g = group([0.6, 0.25, 0.15], [0.05, 0.02, 0.02])
    res = simulate_group(g, 10, seed=1)
    shocked = res.values[0]
    assert res.shocked == 0 and not res.range_limited
    assert abs(shocked.mean() - 0.6) < 1e-12
    assert abs(shocked.std(ddof=1) - 0.05) < 1e-12
    assert np.abs(res.values.sum(axis=0) - 1.0).max() < 1e-12


def test_clamped_sigma_is_used():
    g = group([0.5, 0.5], [0.3, 0.01])
    res = simulate_group(g, 10, seed=2)
    assert res.sigma == pytest.approx(0.2375)
    assert res.values[0].std(ddof=1) == pytest.approx(0.2375, abs=1e-9)


@pytest.mark.parametrize("values", [[None, None], [0.0, 0.0, None]])
def test_no_shock_cases(values):
    res = simulate_group(group(values, [0.1] * len(values)), 10, seed=0)
    assert res.shocked is None


def test_no_shock_without_other_known_mass():
    res = simulate_group(group([0.4, None, None], [0.05, None, None]), 10, seed=0)
    assert res.shocked is None
    assert (res.values[0] == 0.4).all()


def test_missing_members_stay_missing():
    res = simulate_group(group([0.4, None, 0.3], [0.05, None, 0.05]), 10, seed=0)
    assert np.isnan(res.values[1]).all()


def test_streams_depend_on_key_not_order():
    groups = [group([0.6, 0.4], [0.05, 0.05], occ=f"Job{i}") for i in range(5)]
    a = simulate.simulate(groups, 10, seed=3)
    b = simulate.simulate(groups[::-1], 10, seed=3)
    va = dict(zip(a.keys, map(tuple, a.values)))
    vb = dict(zip(b.keys, map(tuple, b.values)))
    assert va == vb
    c = simulate.simulate(groups, 10, seed=3)
    assert np.array_equal(a.values, c.values)


def test_standardize_bounded_uses_linear_map_when_it_fits():
    draws = np.array([0.2, 0.4, 0.5, 0.6, 0.3])
    out, bounded = standardize_bounded(draws, 0.5, 0.1, 1.0)
    z = (draws - draws.mean()) / draws.std(ddof=1)
    assert not bounded
    assert np.array_equal(out, 0.5 + 0.1 * z)


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95), st.floats(0.05, 1.0), st.floats(0.05, 0.95))
@settings(max_examples=150, deadline=None)
def test_standardize_bounded_exact_when_feasible(seed, mean_frac, upper, sd_frac):
    mean = mean_frac * upper
    n = 10
    reachable = max_sample_sd(n, mean, upper)
    sd = sd_frac * reachable
    assume(sd > 1e-6)
    draws = np.random.default_rng(seed).beta(2.0, 5.0, n)
    out, _ = standardize_bounded(draws, mean, sd, upper)
    assert out.min() >= 0.0 and out.max() <= upper
    assert abs(out.mean() - mean) < 1e-9
    assert abs(out.std(ddof=1) - sd) < 1e-9
    # the map is monotone in the draws
    order = np.argsort(draws, kind="stable")
    assert np.all(np.diff(out[order]) >= -1e-15)


def test_standardize_bounded_infeasible_gives_widest_spread():
    draws = np.random.default_rng(0).beta(2.0, 2.0, 10)
    mean, upper = 0.5, 0.55
    out, bounded = standardize_bounded(draws, mean, 0.3, upper)
    assert bounded
    assert abs(out.mean() - mean) < 1e-9
    assert out.std(ddof=1) == pytest.approx(max_sample_sd(10, mean, upper), abs=1e-9)


def test_fixture_simulation_properties(corpus):
    sims = simulate.simulate(corpus.groups(), 10, 0)
    known = ~np.isnan(sims.values[:, 0])
    v = sims.values[known]
    assert v.min() >= 0.0 and v.max() <= 1.0
    original = {r.key: r.value for r in corpus.records}
    base = np.array([np.nan if original[k] is None else original[k] for k in sims.keys])
    sums = {}
    for key, row, b in zip(sims.keys, sims.values, base):
        if not np.isnan(b):
            s = sums.setdefault(key[:2], [np.zeros(10), 0.0])
            s[0] = s[0] + row
            s[1] += b
    assert max(np.abs(s - b).max() for s, b in sums.values()) < 1e-9
    # every shocked record hits its moments unless no sample can
    totals = {k: s[1] for k, s in sums.items()}
    for i in np.flatnonzero(sims.shocked):
        row, mu, sigma = sims.values[i], base[i], sims.sigma[i]
        assert abs(row.mean() - mu) < 1e-9
        ceiling = min(1.0, totals[sims.keys[i][:2]])
        if abs(row.std(ddof=1) - sigma) >= 1e-9:
            assert sigma > max_sample_sd(10, mu, ceiling)
            assert row.std(ddof=1) == pytest.approx(max_sample_sd(10, mu, ceiling), abs=1e-9)


def test_clamp_tally():
    groups = [group([0.5, 0.5], [0.3, 0.01]), group([0.9, 0.1], [0.01, 0.01]), group([None, None])]
    assert clamp_tally(groups) == (1, 1)
