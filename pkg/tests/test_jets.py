import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from finslerflow import jets
from finslerflow.errors import SingularEvaluation, StepUnderflow
from finslerflow.jets import (
    FDConfig,
    Jet,
    fd_derivative,
    fd_oracle,
    horizontal_jet,
    mixed_jet,
    vertical_jet,
)
from finslerflow.metric import fixture, random_samples


def _sample(spec, x, y):
    return spec.make_sample(np.array(x, float), np.array(y, float))


def _random_jet(coefs, nvars=2, degree=3):
    b = jets.basis((nvars, degree))
    c = np.zeros(b.size)
    c[: len(coefs)] = coefs[: b.size]
    return Jet(c, b)


coef_lists = st.lists(st.floats(-2.0, 2.0), min_size=10, max_size=10)


@settings(max_examples=60, deadline=None)
@given(coef_lists, st.floats(0.5, 3.0))
def test_sqrt_squares_back(coefs, c0):
    u = _random_jet([c0] + coefs[1:])
    r = jets.sqrt(u)
    assert np.allclose((r * r).coef, u.coef, atol=1e-11 * (1 + np.abs(u.coef).max()))


@settings(max_examples=60, deadline=None)
@given(coef_lists, coef_lists, st.floats(0.5, 3.0))
def test_division_inverts_multiplication(a, b, c0):
    u = _random_jet(a)
    v = _random_jet([c0] + b[1:])
    w = (u / v) * v
    assert np.allclose(w.coef, u.coef, atol=1e-9 * (1 + np.abs(u.coef).max()))


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(0.3, 2.0))
def test_power_matches_closed_form_derivatives(p, t0):
    b = jets.basis((1, 4))
    t = Jet.variables([t0], b, 0)[0]
    r = jets.power(t, p)
    for k in range(5):
        expected = np.prod([p - j for j in range(k)]) * t0 ** (p - k)
        assert r.derivative((k,)) == pytest.approx(expected, rel=1e-11, abs=1e-12)


def test_matrix_inverse_jet():
    b = jets.basis((2, 3))
    x = Jet.variables([0.3, -0.2], b, 0)
    a = Jet.stack([Jet.stack([2.0 + x[0] * x[0], x[1]]), Jet.stack([x[1], 1.0 + x[0] * x[1]])])
    prod = jets.einsum("ik,kj->ij", a, jets.inverse(a))
    assert np.allclose(prod.coef[..., 0], np.eye(2))
    assert np.allclose(prod.coef[..., 1:], 0.0, atol=1e-12)


def test_singular_compositions_raise():
    b = jets.basis((1, 2))
    zero = Jet.variables([0.0], b, 0)[0]
    with pytest.raises(SingularEvaluation):
        jets.reciprocal(zero)
    with pytest.raises(SingularEvaluation):
        jets.sqrt(zero - 1.0)


def test_euclidean_hessian_and_third():
    spec = fixture("FIX-EUC")
    s = _sample(spec, [0.2, -0.1, 0.4], [0.3, 1.1, -0.7])
    val, grad, hess, third = vertical_jet(spec.F2, s, 3)
    assert val == pytest.approx(np.dot(s.y, s.y))
    assert np.allclose(grad, 2 * s.ya)
    assert np.allclose(hess, 2 * np.eye(3), atol=1e-14)
    assert np.allclose(third, 0.0, atol=1e-14)


def test_minkowski_randers_hessian_against_oracle():
    spec = fixture("FIX-MINK-RANDERS")
    s = _sample(spec, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    hess = vertical_jet(spec.F2, s, 2)[2]
    fd = vertical_jet(spec.F2, s, 2, mode="finite_difference", domain=spec.in_domain)[2]
    assert np.allclose(fd, hess, rtol=1e-7, atol=1e-9)


def test_horizontal_derivatives():
    euc = fixture("FIX-EUC")
    s = _sample(euc, [0.3, 0.1, -0.5], [0.4, -0.2, 0.9])
    _, gx, hx = horizontal_jet(euc.F2, s, 2)
    assert np.all(gx == 0) and np.all(hx == 0)

    sphere = fixture("FIX-SPHERE")
    s = _sample(sphere, [0.0, 0.0, 0.0], [0.4, -0.2, 0.9])
    assert np.allclose(horizontal_jet(sphere.F2, s, 1)[1], 0.0, atol=1e-14)

    var = fixture("FIX-RANDERS-VAR")
    s = _sample(var, [0.3, -0.4, 0.5], [0.4, -0.2, 0.9])
    t = horizontal_jet(var.F2, s, 2)
    d = horizontal_jet(var.F2, s, 2, mode="finite_difference", domain=var.in_domain)
    for a, b in zip(t[1:], d[1:]):
        assert np.allclose(b, a, rtol=1e-7, atol=1e-10)


def test_fd_oracle_examples():
    f = lambda z: np.dot(z, z)
    r = fd_derivative(f, np.array([0.3, -1.2]), (2, 0))
    assert r.value == pytest.approx(2.0, abs=1e-9)

    spec = fixture("FIX-MINK-RANDERS")
    s = _sample(spec, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    F = lambda x, y: jets.sqrt(spec.F2(x, y))
    r = fd_oracle(F, s, (0, 0, 0, 1, 0, 0))
    assert float(r.value) == pytest.approx(1.3, rel=1e-10)


def test_richardson_levels_improve_error():
    f = lambda z: np.exp(np.sin(z[0]) * z[1])
    z = np.array([0.4, 0.7])
    coarse = fd_derivative(f, z, (1, 1), FDConfig(base_step=1e-2, richardson_levels=1))
    fine = fd_derivative(f, z, (1, 1), FDConfig(base_step=1e-2, richardson_levels=2))
    assert fine.error < coarse.error


def test_axis_independent_function_differences_to_zero():
    # nested stencils: no round-off from axes the function ignores
    f = lambda z: np.exp(z[1]) * (1 + z[1] ** 2)
    r = fd_derivative(f, np.array([0.3, 0.2]), (2, 2), FDConfig(extended=False))
    assert r.value == 0.0


def test_step_underflow_when_no_admissible_stencil():
    with pytest.raises(StepUnderflow):
        fd_derivative(lambda z: z[0], np.array([0.0]), (1,), domain=lambda z: z[0] == 0.0)


def test_mixed_tensors_are_symmetric():
    spec = fixture("FIX-RANDERS-VAR")
    s = _sample(spec, [0.3, -0.4, 0.5], [0.4, -0.2, 0.9])
    t = mixed_jet(spec.F2, s.x, s.y, 2, 3)
    third = t[(0, 3)]
    for perm in [(1, 0, 2), (2, 1, 0), (0, 2, 1)]:
        assert np.array_equal(third, third.transpose(perm))
    assert np.array_equal(t[(2, 2)], t[(2, 2)].transpose(1, 0, 3, 2))


@pytest.mark.parametrize("name", ["FIX-EUC", "FIX-MINK-RANDERS", "FIX-RANDERS-VAR", "FIX-SPHERE", "FIX-KROPINA"])
def test_euler_homogeneity_of_F2(name):
    spec = fixture(name)
    for s in random_samples(spec, 10, seed=2):
        v, g1, g2, g3 = vertical_jet(spec.F2, s, 3)
        y = s.ya
        assert y @ g1 == pytest.approx(2 * v, rel=1e-9)
        assert np.allclose(g2 @ y, g1, rtol=1e-9, atol=1e-9 * np.abs(g1).max())
        assert np.allclose(g3 @ y, 0.0, atol=1e-9 * np.abs(g2).max())


def test_order_guards():
    spec = fixture("FIX-EUC")
    s = _sample(spec, [0, 0, 0], [1, 0, 0])
    with pytest.raises(ValueError):
        vertical_jet(spec.F2, s, 4)
    with pytest.raises(ValueError):
        horizontal_jet(spec.F2, s, 3)
    with pytest.raises(ValueError):
        fd_derivative(lambda z: z[0], np.zeros(1), (5,))
