import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gwspeed import rng
from gwspeed.offspring import (LawError, OffspringLaw, backbone_law, conditioned_root_law,
                               extinction_probability, lambda_c, pgf_derivative, pgf_eval, sample,
                               trap_law)

from oracles import compose_coeffs, smallest_root_in_unit


@st.composite
def laws(draw, supercritical=False):
    k = draw(st.integers(1, 6))
    w = draw(st.lists(st.floats(0.0, 1.0), min_size=k + 1, max_size=k + 1))
    w = np.asarray(w)
    w[w < 1e-3] = 0.0
    if w.sum() < 1e-3:
        w[-1] = 1.0
    p = w / w.sum()
    if supercritical and float(np.dot(np.arange(k + 1), p)) <= 1.05:
        p = np.zeros(max(k + 1, 3))
        p[0], p[-1] = 0.3, 0.7
    return OffspringLaw(tuple(p / p.sum()))


def test_leafy_example(leafy_law):
    assert leafy_law.mean == pytest.approx(1.6)
    assert extinction_probability(leafy_law) == pytest.approx(0.25, abs=1e-12)
    assert lambda_c(leafy_law) == pytest.approx(0.4, abs=1e-12)
    assert backbone_law(leafy_law).as_dict() == pytest.approx({1: 0.4, 2: 0.6})
    assert trap_law(leafy_law).as_dict() == pytest.approx({0: 0.8, 2: 0.2})
    assert conditioned_root_law(leafy_law).as_dict() == pytest.approx({2: 1.0})


def test_leafless_law_has_no_extinction(leafless_law):
    assert extinction_probability(leafless_law) == 0.0
    assert lambda_c(leafless_law) == pytest.approx(0.5)
    assert trap_law(leafless_law).empty
    assert backbone_law(leafless_law).as_dict() == pytest.approx(leafless_law.as_dict())


def test_subcritical_and_critical():
    assert extinction_probability(OffspringLaw.from_mapping({0: 0.5, 1: 0.5})) == 1.0
    assert extinction_probability(OffspringLaw.from_mapping({0: 0.5, 2: 0.5})) == 1.0
    with pytest.raises(LawError):
        backbone_law(OffspringLaw.from_mapping({0: 0.5, 2: 0.5}))


@pytest.mark.parametrize("table", [{0: -0.1, 2: 1.1}, {0: 0.3, 2: 0.3}, {-1: 1.0}, {}, {0: float("nan"), 1: 1.0}])
def test_invalid_tables(table):
    with pytest.raises(LawError):
        OffspringLaw.from_mapping(table)


def test_invalid_key_is_named():
    with pytest.raises(LawError, match="key 3"):
        OffspringLaw.from_mapping({0: 0.5, 3: -0.5, 2: 1.0})


def test_pgf_domain():
    law = OffspringLaw.from_mapping({0: 0.2, 2: 0.8})
    with pytest.raises(LawError):
        pgf_eval(law, 1.5)
    with pytest.raises(LawError):
        pgf_derivative(law, -0.1)
    assert pgf_eval(law, 1.0) == pytest.approx(1.0)
    assert pgf_derivative(law, 1.0) == pytest.approx(law.mean)


@settings(max_examples=60, deadline=None)
@given(laws())
def test_extinction_is_smallest_fixed_point(law):
    q = extinction_probability(law)
    assert 0.0 <= q <= 1.0
    if q < 1.0:
        assert pgf_eval(law, q) == pytest.approx(q, abs=1e-10)
        assert q == pytest.approx(smallest_root_in_unit(law.probs), abs=1e-7)


@settings(max_examples=60, deadline=None)
@given(laws(supercritical=True))
def test_harris_laws_match_composition(law):
    q = extinction_probability(law)
    # backbone pgf g(s) = (f(q + (1-q)s) - q) / (1-q)
    g = compose_coeffs(law.probs, q, 1 - q)
    g[0] -= q
    g = g / (1 - q)
    ours = np.zeros(max(len(g), law.kmax + 1))
    ours[: backbone_law(law).kmax + 1] = backbone_law(law).p
    ref = np.zeros_like(ours)
    ref[: len(g)] = g
    np.testing.assert_allclose(ours, ref, atol=1e-9)
    assert backbone_law(law).probs[0] == 0.0
    if q > 0:
        h = trap_law(law)
        assert h.mean == pytest.approx(lambda_c(law), abs=1e-9)
        assert h.mean < 1.0
        ref = np.array([pk * q**k for k, pk in enumerate(law.probs)]) / q
        np.testing.assert_allclose(h.p, ref[: h.kmax + 1], atol=1e-12)
    c = conditioned_root_law(law)
    assert c.probs[0] == 0.0
    assert sum(c.probs) == pytest.approx(1.0)


def test_sampling_frequencies(leafy_law):
    s = rng.Stream.from_seed(3, rng.AUX)
    draws = np.array([sample(leafy_law, s) for _ in range(20000)])
    assert set(np.unique(draws)) <= {0, 2}
    assert np.mean(draws == 0) == pytest.approx(0.2, abs=0.015)


def test_trailing_zeros_trimmed():
    law = OffspringLaw((0.0, 1.0, 0.0, 0.0))
    assert law.kmax == 1 and law.is_deterministic
