"""Fundamental tensor, Cartan torsion and the semi-C-reducibility fit."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import jets
from .errors import FitIllPosed, NotPositiveDefinite, RiemannianDegenerate
from .jets import Jet

EPS_I = 1e-8

COEFFICIENTS = {
    # C_ijk I^i I^j I^k / |I|^4 as a function of (p, q, n)
    "direct": lambda p, q, n: (3.0 * p + (1.0 + n) * q) / (1.0 + n),
    "printed": lambda p, q, n: (1.0 + n * q) / (1.0 + n),
}


@dataclass(frozen=True)
class TensorBundle:
    F: float
    g: np.ndarray
    g_inv: np.ndarray
    C: np.ndarray
    I: np.ndarray
    y_low: np.ndarray
    ell: np.ndarray
    h: np.ndarray
    I_normsq: float
    y: np.ndarray

    @property
    def n(self):
        return self.g.shape[0]

    @property
    def I_up(self):
        return self.g_inv @ self.I

    @property
    def I_norm(self):
        return float(np.sqrt(max(self.I_normsq, 0.0)))

    def to_record(self):
        return {
            "F": self.F,
            "g": self.g.tolist(),
            "g_inv": self.g_inv.tolist(),
            "C": self.C.tolist(),
            "I": self.I.tolist(),
            "y_low": self.y_low.tolist(),
            "ell": self.ell.tolist(),
            "h": self.h.tolist(),
            "I_normsq": self.I_normsq,
        }


def bundle_from(g, C, y, F=None):
    """Derived tensors from (g, C) at direction y.

    ``F`` defaults to sqrt(g(y, y)), which keeps h_ij y^j = 0 exact for
    deformed or synthetic tensors.
    """
    g = np.asarray(g, dtype=float)
    y = np.asarray(y, dtype=float)
    g_inv = np.linalg.inv(g)
    I = np.einsum("jk,ijk->i", g_inv, C)
    y_low = g @ y
    if F is None:
        F = float(np.sqrt(y @ y_low))
    ell = y_low / F
    h = g - np.outer(ell, ell)
    return TensorBundle(float(F), g, g_inv, np.asarray(C, float), I, y_low, ell, h, float(I @ g_inv @ I), y)


def compute_bundle(spec, sample):
    n = spec.n
    b = jets.basis((n, 3))
    F2 = spec.F2(sample.xa, Jet.variables(sample.y, b, 0))
    g = 0.5 * jets._tensor_from_jet(F2, 0, n, 2, n)
    C = 0.25 * jets._tensor_from_jet(F2, 0, n, 3, n)
    lam = np.linalg.eigvalsh(g)
    if lam.min() <= 0:
        raise NotPositiveDefinite(f"g_y has eigenvalue {lam.min():.3g} at sample {sample.sid}", sample)
    return bundle_from(g, C, sample.y, F=float(np.sqrt(F2.value)))


def deicke_indicator(spec, samples):
    if not samples:
        raise ValueError("deicke_indicator needs at least one sample")
    return max(compute_bundle(spec, s).I_norm for s in samples)


def semi_c_form(bundle, p, q):
    """p/(1+n) (h_ij I_k + h_jk I_i + h_ki I_j) + q I_i I_j I_k / |I|^2."""
    n = bundle.n
    return p / (1.0 + n) * h_sym(bundle.h, bundle.I) + q * np.einsum("i,j,k->ijk", bundle.I, bundle.I, bundle.I) / bundle.I_normsq


def h_sym(h, I):
    return np.einsum("ij,k->ijk", h, I) + np.einsum("jk,i->ijk", h, I) + np.einsum("ki,j->ijk", h, I)


def g_norm3(T, g_inv):
    return float(np.sqrt(max(np.einsum("ijk,ia,jb,kc,abc->", T, g_inv, g_inv, g_inv, T), 0.0)))


def kappa(bundle):
    """C_ijk I^i I^j I^k / |I|^4."""
    Iu = bundle.I_up
    return float(np.einsum("ijk,i,j,k->", bundle.C, Iu, Iu, Iu) / bundle.I_normsq ** 2)


@dataclass(frozen=True)
class SemiCFit:
    p: float
    q: float
    decomposition_residual: float
    kappa: float = float("nan")
    coefficient: str = "direct"


def _check_fit(bundle, n, eps_I):
    if n < 3:
        raise FitIllPosed("semi-C-reducibility needs n >= 3")
    if not bundle.I_normsq > eps_I:
        raise RiemannianDegenerate(f"|I|^2 = {bundle.I_normsq:.3g} <= {eps_I:g}")


def semi_c_fit(bundle, n, coefficient="direct", eps_I=EPS_I):
    """(p, q) from the I^3 contraction kappa = coef(p, q, n), with p = 1 - q."""
    _check_fit(bundle, n, eps_I)
    k = kappa(bundle)
    if coefficient == "direct":
        # kappa = (3(1-q) + (1+n) q)/(1+n)
        q = ((1.0 + n) * k - 3.0) / (n - 2.0)
    elif coefficient == "printed":
        q = ((1.0 + n) * k - 1.0) / n
    else:
        raise ValueError(f"unknown coefficient {coefficient!r}")
    p = 1.0 - q
    return SemiCFit(p, q, decomposition_residual(bundle, p, q), k, coefficient)


def decomposition_residual(bundle, p, q):
    diff = bundle.C - semi_c_form(bundle, p, q)
    scale = g_norm3(bundle.C, bundle.g_inv)
    return g_norm3(diff, bundle.g_inv) / scale if scale > 0 else 0.0


def semi_c_lsq(bundle, n, eps_I=EPS_I):
    """Unconstrained g-weighted least squares for C ~ a H + b T; returns (p, q, residual)."""
    _check_fit(bundle, n, eps_I)
    H = h_sym(bundle.h, bundle.I)
    T = np.einsum("i,j,k->ijk", bundle.I, bundle.I, bundle.I) / bundle.I_normsq
    gi = bundle.g_inv

    def ip(A, B):
        return float(np.einsum("ijk,ia,jb,kc,abc->", A, gi, gi, gi, B))

    M = np.array([[ip(H, H), ip(H, T)], [ip(T, H), ip(T, T)]])
    rhs = np.array([ip(H, bundle.C), ip(T, bundle.C)])
    a, q = np.linalg.solve(M, rhs)
    p = a * (1.0 + n)
    return float(p), float(q), decomposition_residual(bundle, p, q)
