from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from finslerflow.errors import ConfigError, EmptyFiber, InadmissibleSample
from finslerflow.metric import (
    FIXTURES,
    ChartSpec,
    OneFormField,
    PhiProfile,
    admissibility_check,
    evaluate_F,
    fixture,
    random_samples,
    sample_lattice,
    unit_directions,
)


def test_evaluate_F_closed_forms():
    euc = fixture("FIX-EUC")
    assert evaluate_F(euc, euc.make_sample((0, 0, 0), (3, 4, 0))) == pytest.approx(5.0, rel=1e-15)
    mink = fixture("FIX-MINK-RANDERS")
    assert evaluate_F(mink, mink.make_sample((0, 0, 0), (1, 0, 0))) == pytest.approx(1.3, rel=1e-15)
    # s = 0.5 lies just above the fixture's sampling window, so widen it for this check
    kro = replace(fixture("FIX-KROPINA"), phi=PhiProfile("kropina", b0=1.0, s_range=(0.2, 0.6)))
    assert evaluate_F(kro, kro.make_sample((0, 0, 0), (1, 0, 0))) == pytest.approx(2.0, rel=1e-15)
    narrow = fixture("FIX-KROPINA")
    with pytest.raises(InadmissibleSample):
        evaluate_F(narrow, narrow.make_sample((0, 0, 0), (1, 0, 0)))


def test_evaluate_F_rejects_out_of_range():
    kro = fixture("FIX-KROPINA")
    with pytest.raises(InadmissibleSample):
        evaluate_F(kro, kro.make_sample((0, 0, 0), (0, 1, 0)))
    euc = fixture("FIX-EUC")
    with pytest.raises(InadmissibleSample):
        evaluate_F(euc, euc.make_sample((0, 0, 0), (0, 0, 0)))


def test_admissibility_examples():
    kro = fixture("FIX-KROPINA")
    v = admissibility_check(kro, kro.make_sample((0, 0, 0), (0, 1, 0)))
    assert not v.admissible and not v.s_in_range

    euc = fixture("FIX-EUC")
    for y in unit_directions(3, 8, seed=4):
        assert admissibility_check(euc, euc.make_sample((0.1, 0.2, 0.3), y)).admissible

    mink = fixture("FIX-MINK-RANDERS")
    v = admissibility_check(mink, mink.make_sample((0, 0, 0), (-1, 0, 0)))
    assert v.admissible and v.min_eigenvalue > 0 and v.s == pytest.approx(-0.3)


def test_admissibility_is_pure():
    var = fixture("FIX-RANDERS-VAR")
    s = var.make_sample((0.3, -0.2, 0.5), (0.1, 0.9, -0.4))
    assert admissibility_check(var, s) == admissibility_check(var, s)


def test_euclidean_lattice_count():
    assert len(sample_lattice(fixture("FIX-EUC"), 12)) == 96


def test_kropina_lattice_keeps_exactly_the_directions_in_range():
    kro = fixture("FIX-KROPINA")
    dirs = unit_directions(3, 12, seed=0, symmetric=True)
    # beta = 0.5 y^1 and alpha = |y|: s = 0.5 y^1 for unit y
    expected = sum(1 for d in dirs if 0.2 <= 0.5 * d[0] <= 0.49)
    samples = sample_lattice(kro, 12, symmetric=True)
    per_point = len(samples) // len(kro.chart.base_points())
    assert per_point == expected
    assert all(0.2 <= s.s <= 0.49 for s in samples)


def test_lattice_is_deterministic():
    var = fixture("FIX-RANDERS-VAR")
    assert sample_lattice(var, 6, seed=3) == sample_lattice(var, 6, seed=3)


def test_lattice_guards():
    with pytest.raises(ValueError):
        sample_lattice(fixture("FIX-EUC"), 3)
    narrow = replace(fixture("FIX-KROPINA"), phi=PhiProfile("kropina", b0=1.0, s_range=(0.45, 0.46)))
    with pytest.raises(EmptyFiber):
        sample_lattice(narrow, 4, seed=0)


@pytest.mark.parametrize("name", FIXTURES)
def test_F_is_positively_homogeneous(name):
    spec = fixture(name)
    for s in random_samples(spec, 20, seed=5):
        F = evaluate_F(spec, s)
        for lam in (0.5, 2.0, 7.0):
            Fl = spec.F(s.x, lam * s.ya)
            assert abs(Fl - lam * F) <= 1e-12 * lam * F


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-0.8, 0.8), min_size=3, max_size=3))
def test_sphere_metric_positive_definite(x):
    sphere = fixture("FIX-SPHERE")
    a = sphere.alpha(np.array(x))
    assert np.linalg.eigvalsh(a).min() > 0
    expected = 4.0 / (1.0 + np.dot(x, x)) ** 2
    assert np.allclose(a, expected * np.eye(3), rtol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.98, 0.98), st.floats(0.0, 0.6))
def test_randers_positivity_functional(s, b):
    # phi - s phi' + (b^2 - s^2) phi'' = 1 for Randers
    assert PhiProfile("randers").positivity_functional(s, b * b) == pytest.approx(1.0)


def test_validation_errors():
    with pytest.raises(ConfigError):
        ChartSpec(1, ((0, 1),), (1,))
    with pytest.raises(ConfigError):
        ChartSpec(2, ((0, 1), (1, 1)), (1, 1))
    with pytest.raises(ConfigError):
        ChartSpec(2, ((0, 1), (0, 1)), (0, 1))
    with pytest.raises(ConfigError, match="b0"):
        PhiProfile("polynomial", coefficients=(1.0, 0.5))
    mink = fixture("FIX-MINK-RANDERS")
    strong = mink.with_fields(beta=OneFormField("constant", 3, constant=(1.2, 0.0, 0.0)))
    with pytest.raises(ConfigError):
        strong.validate()
    with pytest.raises(ConfigError):
        fixture("FIX-NOPE")


def test_random_samples_are_admissible_and_reproducible():
    kro = fixture("FIX-KROPINA")
    a = random_samples(kro, 15, seed=9)
    assert a == random_samples(kro, 15, seed=9)
    assert all(s.admissible and kro.chart.contains(s.x) for s in a)
