"""Spray, Riemann curvature, Ricci quantities and the Einstein diagnostic.

Curvature is computed from one jet of F^2 in (x, y) of total degree 4.  With
``outer_order > 0`` every jet coefficient is itself a jet in an extra vertical
perturbation of y, which yields the y-derivatives of R, Ric_ij, Ric_ij,k and
rho_i exactly.  :func:`curvature_fd` recomputes the same derivatives by
finite differences over the pipeline and serves as the independent route.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import jets
from .jets import FDConfig, Jet, fd_derivative, multi_indices, symmetric_tensor
from .metric import fundamental_tensor
from .tensors import TensorBundle, bundle_from

CONVENTION = (
    "R^i_k = 2 dG^i/dx^k - y^j d2G^i/dx^j dy^k + 2 G^j d2G^i/dy^j dy^k - dG^i/dy^j dG^j/dy^k; "
    "Ric = R^k_k; R = Ric/F^2; Ric_ij = 1/2 [F^2 R]_{y^i y^j}"
)

TOL_EINSTEIN = 1e-4
EPS_EINSTEIN = 1e-12


@dataclass
class CurvatureBundle:
    G: np.ndarray
    Rmk: np.ndarray
    Ric: float
    Rnorm: float
    F2: float
    tensors: TensorBundle
    Ric_ij: np.ndarray | None = None
    Ric_ijk: np.ndarray | None = None
    rho: float | None = None
    rho_i: np.ndarray | None = None
    R_der1: np.ndarray | None = None
    R_der2: np.ndarray | None = None
    R_der3: np.ndarray | None = None
    FR_der1: np.ndarray | None = None
    route: str = "taylor"

    def to_record(self):
        rec = {"G": self.G.tolist(), "Rmk": self.Rmk.tolist(), "Ric": self.Ric, "Rnorm": self.Rnorm}
        for name in ("Ric_ij", "rho", "rho_i", "R_der1", "R_der2", "R_der3"):
            v = getattr(self, name)
            rec[name] = v.tolist() if isinstance(v, np.ndarray) else v
        rec["convention"] = CONVENTION
        return rec


def _unit(n, i, total=None, offset=0):
    e = [0] * (total or n)
    e[offset + i] += 1
    return e


def _pipeline(spec, x, y, outer_order):
    """Return outer-group jets of (G, R^i_k, Ric, F^2, g)."""
    n = spec.n
    groups = [(2 * n, 4)] + ([(n, outer_order)] if outer_order else [])
    b = jets.basis(*groups)
    X = Jet.variables(x, b, 0)
    Y = Jet.variables(y, b, n)
    if outer_order:
        Y = Y + Jet.variables(np.zeros(n), b, 2 * n)
    F2 = spec.F2(X, Y)
    if not isinstance(F2, Jet):
        F2 = Jet.constant(F2, b)

    small = jets.basis(*([(2 * n, 2)] + ([(n, outer_order)] if outer_order else [])))
    dy = [F2.d(n + i) for i in range(n)]
    g = Jet.stack([Jet.stack([dy[i].d(n + j) * 0.5 for j in range(n)]) for i in range(n)]).restrict(small)
    F2x = Jet.stack([F2.d(l) for l in range(n)]).restrict(small)
    F2xy = Jet.stack([Jet.stack([dy[l].d(k) for l in range(n)]) for k in range(n)]).restrict(small)
    Ys = Y.restrict(small)
    g_inv = jets.inverse(g)
    G = jets.einsum("il,l->i", g_inv, jets.einsum("kl,k->l", F2xy, Ys) - F2x) * 0.25

    zero = [0] * (2 * n)
    G0 = G.slice_group(0, zero)
    dGdx = Jet.stack([G.slice_group(0, _unit(n, k, 2 * n)) for k in range(n)])  # [k, i]
    dGdy = Jet.stack([G.slice_group(0, _unit(n, k, 2 * n, n)) for k in range(n)])  # [k, i]
    d2xy = Jet.stack([Jet.stack([G.slice_group(0, _pair(n, j, k, True)) for k in range(n)]) for j in range(n)])
    d2yy = Jet.stack([Jet.stack([G.slice_group(0, _pair(n, j, k, False)) for k in range(n)]) for j in range(n)])
    ob = G0.basis
    Yo = Jet.variables(y, ob, 0) if outer_order else Jet.constant(y, ob)

    # index layout: dGdx[k, i] = dG^i/dx^k; d2xy[j, k, i] = d2G^i/dx^j dy^k
    term1 = dGdx * 2.0
    term2 = jets.einsum("j,jki->ki", Yo, d2xy)
    term3 = jets.einsum("j,jki->ki", G0, d2yy) * 2.0
    term4 = jets.einsum("ji,kj->ki", dGdy, dGdy)
    Rki = term1 - term2 + term3 - term4
    Rmk = Jet(np.swapaxes(Rki.coef, 0, 1), ob, Rki.valid)  # [i, k]
    Ric = Jet(Rmk.coef[0, 0] + sum(Rmk.coef[i, i] for i in range(1, n)), ob, Rmk.valid)
    return G0, Rmk, Ric, F2.slice_group(0, zero), g.slice_group(0, zero), F2


def _pair(n, j, k, mixed):
    e = [0] * (2 * n)
    e[j if mixed else n + j] += 1
    e[n + k] += 1
    return e


def curvature_bundle(spec, sample, derivatives=True):
    """Curvature at one sample; ``derivatives`` adds the order-3 vertical jets."""
    n = spec.n
    x, y = sample.xa, sample.ya
    outer = 3 if derivatives else 0
    G0, Rmk, Ric, F2o, go, F2full = _pipeline(spec, x, y, outer)
    F2v = float(F2o.value)
    if derivatives:
        Cvals = {m: F2o.derivative(m) for m in multi_indices(n, 3)}
        C = 0.25 * symmetric_tensor(Cvals, n, 3)
    else:
        C = 0.25 * jets._tensor_from_jet(F2full, n, n, 3, n)
    tb = bundle_from(go.value, C, y, F=math.sqrt(F2v))
    cb = CurvatureBundle(G=G0.value.copy(), Rmk=Rmk.value.copy(), Ric=float(Ric.value), Rnorm=float(Ric.value) / F2v,
                         F2=F2v, tensors=tb)
    if not derivatives:
        return cb
    Rn = Ric / F2o
    cb.R_der1 = np.array([Rn.derivative(_unit(n, i)) for i in range(n)])
    cb.R_der2 = symmetric_tensor({m: Rn.derivative(m) for m in multi_indices(n, 2)}, n, 2)
    cb.R_der3 = symmetric_tensor({m: Rn.derivative(m) for m in multi_indices(n, 3)}, n, 3)
    cb.FR_der1 = np.array([Ric.derivative(_unit(n, i)) for i in range(n)])
    cb.Ric_ij = 0.5 * symmetric_tensor({m: Ric.derivative(m) for m in multi_indices(n, 2)}, n, 2)
    cb.Ric_ijk = 0.5 * symmetric_tensor({m: Ric.derivative(m) for m in multi_indices(n, 3)}, n, 3)
    dRic = [Ric.d(i) for i in range(n)]
    RicT = Jet.stack([Jet.stack([dRic[i].d(j) * 0.5 for j in range(n)]) for i in range(n)])
    rho = jets.einsum("jk,jk->", jets.inverse(go), RicT)
    cb.rho = float(rho.value)
    cb.rho_i = np.array([rho.derivative(_unit(n, i)) for i in range(n)])
    return cb


def spray_coefficients(spec, sample):
    return curvature_bundle(spec, sample, derivatives=False).G


def riemann_curvature(spec, sample):
    cb = curvature_bundle(spec, sample, derivatives=False)
    return cb.Rmk, cb.Ric


def normalized_ricci(spec, x, y):
    """R = Ric / F^2 at a plain point (no vertical derivatives)."""
    _, _, Ric, F2o, _, _ = _pipeline(spec, np.asarray(x, float), np.asarray(y, float), 0)
    return float(Ric.value) / float(F2o.value)


def ricci_scalar(spec, x, y):
    _, _, Ric, _, _, _ = _pipeline(spec, np.asarray(x, float), np.asarray(y, float), 0)
    return float(Ric.value)


def ricci_tensor_and_rho(spec, sample):
    cb = curvature_bundle(spec, sample)
    return cb.Ric_ij, cb.rho, cb.rho_i


# -- finite-difference route ----------------------------------------------

DEFAULT_CURVATURE_FD = FDConfig(base_step=1e-3, richardson_levels=2, order_scale=(1.0, 2.0, 5.0, 20.0, 30.0))


@dataclass
class FDCurvature:
    R_der1: np.ndarray
    R_der2: np.ndarray
    R_der3: np.ndarray | None
    FR_der1: np.ndarray
    Ric_ij: np.ndarray
    Ric_ijk: np.ndarray | None
    rho: float
    rho_i: np.ndarray | None
    error: float


def curvature_fd(spec, sample, max_order=3, fd=DEFAULT_CURVATURE_FD, with_rho_i=False):
    """Vertical derivatives of R and Ric by central differences over the curvature pipeline."""
    n = spec.n
    x = sample.xa
    cache = {}

    def both(z):
        key = tuple(np.round(z, 15))
        if key not in cache:
            _, _, Ric, F2o, _, _ = _pipeline(spec, x, z, 0)
            cache[key] = np.array([float(Ric.value) / float(F2o.value), float(Ric.value)])
        return cache[key]

    dom = lambda z: spec.in_domain(x, z)
    err = 0.0
    ders = {}
    for k in range(1, max_order + 1):
        for m in multi_indices(n, k):
            r = fd_derivative(both, sample.y, m, fd, dom)
            ders[m] = r.value
            err = max(err, r.error)
    R = {m: v[0] for m, v in ders.items()}
    FR = {m: v[1] for m, v in ders.items()}
    Ric_ij = 0.5 * symmetric_tensor({m: FR[m] for m in multi_indices(n, 2)}, n, 2)
    out = FDCurvature(
        R_der1=np.array([R[tuple(_unit(n, i))] for i in range(n)]),
        R_der2=symmetric_tensor({m: R[m] for m in multi_indices(n, 2)}, n, 2),
        R_der3=symmetric_tensor({m: R[m] for m in multi_indices(n, 3)}, n, 3) if max_order >= 3 else None,
        FR_der1=np.array([FR[tuple(_unit(n, i))] for i in range(n)]),
        Ric_ij=Ric_ij,
        Ric_ijk=0.5 * symmetric_tensor({m: FR[m] for m in multi_indices(n, 3)}, n, 3) if max_order >= 3 else None,
        rho=0.0,
        rho_i=None,
        error=err,
    )
    out.rho = float(np.einsum("jk,jk->", np.linalg.inv(fundamental_tensor(spec, x, sample.y)), Ric_ij))
    if with_rho_i:
        inner = FDConfig(fd.base_step, fd.richardson_levels, fd.order_scale)

        def rho_at(z):
            smp = spec.make_sample(x, z)
            sub = curvature_fd(spec, smp, max_order=2, fd=inner)
            return sub.rho

        outer = FDConfig(fd.base_step * 3.0, 1, fd.order_scale)
        out.rho_i = np.array([fd_derivative(rho_at, sample.y, _unit(n, i), outer, dom).value for i in range(n)])
    return out


# -- classical Riemannian oracle --------------------------------------------

def christoffel_oracle(alpha, x, fd=FDConfig(base_step=1e-3, richardson_levels=3)):
    """Christoffel symbols Gamma^i_jk and Ricci tensor of a_ij(x) by central differences only."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    a = lambda z: np.asarray(alpha(np.asarray(z, float)), float)
    a0 = a(x)
    ai = np.linalg.inv(a0)
    da = np.zeros((n, n, n))  # da[l] = d a / dx^l
    dda = np.zeros((n, n, n, n))
    for l in range(n):
        da[l] = fd_derivative(a, x, _unit(n, l), fd).value
        for m in range(l, n):
            e = [0] * n
            e[l] += 1
            e[m] += 1
            dda[l, m] = dda[m, l] = fd_derivative(a, x, e, fd).value
    # Gamma_l,jk (first kind) and its derivative
    gam1 = np.zeros((n, n, n))
    dgam1 = np.zeros((n, n, n, n))  # [m, l, j, k] = d/dx^m Gamma_{l,jk}
    for l in range(n):
        for j in range(n):
            for k in range(n):
                gam1[l, j, k] = 0.5 * (da[j, l, k] + da[k, l, j] - da[l, j, k])
                for m in range(n):
                    dgam1[m, l, j, k] = 0.5 * (dda[m, j, l, k] + dda[m, k, l, j] - dda[m, l, j, k])
    Gamma = np.einsum("il,ljk->ijk", ai, gam1)
    dai = -np.einsum("ia,mab,bl->mil", ai, da, ai)
    dGamma = np.einsum("mil,ljk->mijk", dai, gam1) + np.einsum("il,mljk->mijk", ai, dgam1)
    ricci = (
        np.einsum("iijk->jk", dGamma)
        - np.einsum("kiij->jk", dGamma)
        + np.einsum("iip,pjk->jk", Gamma, Gamma)
        - np.einsum("ikp,pij->jk", Gamma, Gamma)
    )
    return Gamma, ricci


# -- Einstein diagnostic -----------------------------------------------------

@dataclass
class DiagnosticReport:
    points: list
    mean_R_per_x: list
    deviation_per_x: list
    max_rel_deviation: float
    einstein: bool
    tolerance: float

    def csv_rows(self):
        return [(list(p), m, d) for p, m, d in zip(self.points, self.mean_R_per_x, self.deviation_per_x)]


def _workers():
    return max(1, int(os.environ.get("FINSLERFLOW_THREADS", "1")))


def map_samples(fn, samples):
    """Per-sample map honoring the FINSLERFLOW_THREADS cap."""
    w = _workers()
    if w == 1 or len(samples) < 2:
        return [fn(s) for s in samples]
    with ThreadPoolExecutor(max_workers=w) as ex:
        return list(ex.map(fn, samples))


def einstein_diagnostic(spec, samples, tol=TOL_EINSTEIN, eps=EPS_EINSTEIN):
    groups = {}
    for s in samples:
        groups.setdefault(s.x, []).append(s)
    n = spec.n
    short = [x for x, ss in groups.items() if len(ss) < n + 1]
    if short:
        raise ValueError(f"einstein_diagnostic needs >= n+1 directions per base point; short at {list(short[0])}")
    values = map_samples(lambda s: normalized_ricci(spec, s.x, s.y), samples)
    byx = {}
    for s, v in zip(samples, values):
        byx.setdefault(s.x, []).append(v)
    pts, means, devs = [], [], []
    for x, vals in byx.items():
        vals = np.array(vals)
        mean = float(vals.mean())
        pts.append(x)
        means.append(mean)
        devs.append(float(np.max(np.abs(vals - mean)) / (abs(mean) + eps)))
    worst = max(devs)
    return DiagnosticReport(pts, means, devs, worst, bool(worst <= tol), tol)
