import numpy as np
import pytest

from gwspeed import rng
from gwspeed.conductance import (aidekon_speed, annealed_escape, escape_probability_truncated,
                                 escape_profile, lower_bound_lpp3, lpp3_fixed_point,
                                 rayleigh_monotonicity_check)
from gwspeed.offspring import LawError, OffspringLaw
from gwspeed.tree import TreeArena
from gwspeed.walk import RegimeError, run_short_paths

from conftest import dary, half_line
from oracles import dary_escape, dirichlet_escape


@pytest.mark.parametrize("lam", [0.2, 0.5, 0.9])
def test_half_line_gamblers_ruin(lam):
    assert escape_probability_truncated(TreeArena(half_line(), 0), lam, 2**12) == pytest.approx(1 - lam, abs=1e-3)


@pytest.mark.parametrize("d,lam", [(2, 1.0), (2, 0.5), (3, 2.0)])
def test_dary_gamblers_ruin(d, lam):
    assert escape_probability_truncated(TreeArena(dary(d), 0), lam, 2**12) == pytest.approx(dary_escape(d, lam), abs=1e-3)


def test_recurrent_regime_decays():
    a = TreeArena(dary(2), 0)
    assert escape_probability_truncated(a, 2.5, 200) < 1e-10
    assert escape_probability_truncated(a, 2.0, 4000) < escape_probability_truncated(a, 2.0, 400) < 0.01


@pytest.mark.parametrize("seed", range(6))
def test_recursion_matches_linear_solve(leafy, seed):
    a = TreeArena(leafy, rng.stream_key(seed, rng.TREE))
    for lam in (0.6, 1.0, 1.4):
        assert escape_probability_truncated(a, lam, 6) == pytest.approx(dirichlet_escape(a, lam, 6), abs=1e-12)


def test_truncation_monotone(leafless):
    for s in range(10):
        a = TreeArena(leafless, rng.stream_key(s, rng.TREE))
        esc = [escape_probability_truncated(a, 1.0, n) for n in range(1, 16)]
        assert np.all(np.diff(esc) <= 1e-15)


def test_rayleigh_examples(leafy):
    rows = rayleigh_monotonicity_check(leafy, [0.5, 1.0, 1.5], 10, 8, 0)
    assert all(r["passed"] for r in rows)
    hl = rayleigh_monotonicity_check(half_line(), [0.3, 0.6], 1, 4096, 0)
    np.testing.assert_allclose(hl[0]["escape"], [0.7, 0.4], atol=1e-9)
    assert rayleigh_monotonicity_check(leafy, [1.0], 2, 5, 0)[0]["passed"]
    with pytest.raises(ValueError):
        rayleigh_monotonicity_check(leafy, [1.0, 0.5], 1, 5, 0)


def test_conventions_differ_only_on_random_trees(leafless):
    a = TreeArena(dary(2), 0)
    assert escape_probability_truncated(a, 1.0, 200, "T") == pytest.approx(0.5, abs=1e-9)
    b = TreeArena(leafless, rng.stream_key(1, rng.TREE))
    p = escape_profile(b, [1.0], 10, "T")[0]
    kids = b.children(b.root)
    assert 0 < p < 1 and len(kids) >= 1


def test_escape_matches_simulation_on_fixed_trees(leafy):
    N = 12
    for s in range(20):
        a = TreeArena(leafy, rng.stream_key(s, 4, rng.TREE), augmented=True)
        p = escape_probability_truncated(TreeArena(leafy, rng.stream_key(s, 4, rng.TREE)), 1.0, N)
        sp = run_short_paths(a, 1.0, 1500, 1500, rng.stream_key(s, rng.WALK))
        D = sp.depths
        hit_n = np.where((D >= N).any(1), (D >= N).argmax(1), 10**9)
        hit_star = np.where((D < 0).any(1), (D < 0).argmax(1), 10**9)
        resolved = (hit_n < 10**9) | (hit_star < 10**9)
        assert resolved.mean() > 0.999
        freq = np.mean(hit_n < hit_star)
        se = np.sqrt(p * (1 - p) / D.shape[0])
        assert abs(freq - p) < 3 * se + 1e-3


def test_annealed_escape_binary_tree():
    e = annealed_escape(dary(2), 1.0, 5, 8, 0)
    assert e.escape == pytest.approx(0.5, abs=1e-3) and e.gap < 1e-3


def test_annealed_escape_continuity(leafless):
    a = annealed_escape(leafless, 1.0, 60, 8, 3)
    b = annealed_escape(leafless, 1.01, 60, 8, 3)
    assert abs(a.escape - b.escape) < 0.02


def test_aidekon_binary_tree_is_exact():
    e = aidekon_speed(dary(2), 1.0, 20, 60, 0, n_bootstrap=100)
    assert e.speed == pytest.approx(1 / 3, abs=1e-9)


def test_aidekon_guards(leafy, leafless):
    with pytest.raises(LawError):
        aidekon_speed(leafy, 1.0, 10)
    with pytest.raises(RegimeError):
        aidekon_speed(leafless, 1.6, 10)


def test_aidekon_trend_to_zero(leafless):
    near = aidekon_speed(leafless, 1.45, 300, 12, 2, n_bootstrap=200)
    mid = aidekon_speed(leafless, 1.0, 300, 12, 2, n_bootstrap=200)
    assert near.speed < mid.speed


def test_lpp3_binary_closed_form():
    # q = (1 - (1 - q)/1.5)^2 has roots 1/4 and 1; the smallest is 1/4
    assert lpp3_fixed_point(OffspringLaw.deterministic(2), 1.5) == pytest.approx(0.25, abs=1e-12)
    b = lower_bound_lpp3(OffspringLaw.deterministic(2), 1.5)
    assert b == pytest.approx((1 / 3) ** 3 * 0.75**2 / 12, rel=1e-10)
    assert b < 1 / 7


def test_lpp3_vanishes_at_one(leafless_law):
    assert lower_bound_lpp3(leafless_law, 1.0 + 1e-6) < 1e-15
    with pytest.raises(LawError):
        lower_bound_lpp3(leafless_law, 1.0)
    q = lpp3_fixed_point(leafless_law, 1.2)
    f = 0.5 * (1 - (1 - q) / 1.2) + 0.5 * (1 - (1 - q) / 1.2) ** 2
    assert f == pytest.approx(q, abs=1e-12)
