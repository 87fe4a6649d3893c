"""Residual audits of the variation identities for Cartan-type tensors under Ricci flow.

Every time derivative is substituted by the flow equations, never integrated:
g' = -2 Ric_ij, C' = -Ric_ij,k, F'/F = -R (plus the <R> terms in normalized
mode).  Derivatives of composite quantities (inverse metric, mean Cartan
torsion, angular metric, ...) are taken along that substitution with a
complex-step tangent, which is exact to rounding and linear in the
substituted rates.

Left sides use the finite-difference curvature route where a curvature
derivative enters; right sides use the nested-Taylor route.  A case passes
when the worst per-sample residual |lhs - rhs| / (|lhs| + |rhs| + eps) is
within its rung of the tolerance ladder.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .curvature import CONVENTION, DEFAULT_CURVATURE_FD, curvature_bundle, curvature_fd, map_samples
from .errors import FitIllPosed, ProbeStepInvalid, RiemannianDegenerate
from .tensors import COEFFICIENTS, EPS_I, bundle_from, h_sym, semi_c_fit, semi_c_form, semi_c_lsq

EPS_RESIDUAL = 1e-14
LADDER = {"order2": 1e-4, "order3": 1e-3, "probe": 5e-3}
LINEARITY_TOL = 1e-12
# finite-difference noise of the curvature route relative to max|Ric_ij|; added to
# the residual denominator of uncontracted tensor identities
NOISE_FLOOR = 1e-5
COEFFICIENT_MATCH_TOL = 1e-3


def relative_residual(lhs, rhs, eps=EPS_RESIDUAL):
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    num = float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0
    return num / (float(np.max(np.abs(lhs))) + float(np.max(np.abs(rhs))) + eps)


@dataclass
class IdentityCase:
    id: str
    rung: str
    requires_semi_c: bool = False
    contracted: bool = False
    description: str = ""

    @property
    def tolerance(self):
        return LADDER[self.rung]


CASES = {c.id: c for c in [
    IdentityCase("eq-R", "order2", description="Ric_ij = R g_ij + F^2 R_ij / 2 + R_i y_j + R_j y_i"),
    IdentityCase("eq-Ric1", "order3", description="vertical derivative of eq-R"),
    IdentityCase("eq-Ric", "order3", contracted=True, description="eq-Ric1 contracted with I^i I^j I^k"),
    IdentityCase("eq-C", "order3", requires_semi_c=True, contracted=True,
                 description="C(I,I,I)/|I|^4 against the two closed-form coefficients"),
    IdentityCase("eq-Ric3", "order3", requires_semi_c=True, contracted=True,
                 description="C' I^3 in terms of R, q and vertical derivatives of R"),
    IdentityCase("eq-Car", "order3", description="C'_ijk = -Ric_ij,k"),
    IdentityCase("lemma2-gprime", "order2", description="(g^il)' = 2 Ric^il"),
    IdentityCase("lemma2-Iprime", "order3", description="I'_i = -rho_i"),
    IdentityCase("lemma2-Iprime-up", "order3", description="(I^i)' = 2 Ric^ij I_j - rho^i"),
    IdentityCase("lemma2-yprime", "order2", description="y'_i = -2 Ric_im y^m"),
    IdentityCase("lemma2-hprime", "order2", description="h'_ij = 2R h - 2R g - 2 Ric + 2 Lambda"),
    IdentityCase("lemma2-eq-1", "order3", contracted=True,
                 description="(I_i I_j I_k / |I|^2)' as -(|I|^2)' C_ijk/|I|^2 - sym(rho I I)/|I|^2"),
    IdentityCase("lemma2-eq1", "order3", contracted=True, description="(I I I / |I|^2)' contracted with I^3"),
    IdentityCase("lemma2-eq2", "order3", contracted=True, description="(h_ij I_k + cyclic)'"),
    IdentityCase("lemma2-eq3", "order3", contracted=True, description="(h_ij I_k + cyclic)' contracted with I^3"),
    IdentityCase("lemma2-eq4", "order3", requires_semi_c=True, contracted=True,
                 description="(p'/(1+n) H + q' T)(I,I,I) with p' + q' = 0"),
    IdentityCase("lemma2-final", "probe", requires_semi_c=True, contracted=True,
                 description="closed form of C' I^3 with q' from a linearized probe"),
    IdentityCase("sec5-Iprime", "order3", contracted=True, description="normalized I'_i = -rho_i"),
    IdentityCase("sec5-Cprime", "order3", contracted=True, description="normalized C' I^3 = (Omega |I|^2 - 3 rho.I)|I|^2"),
    IdentityCase("sec5-Omega", "order3", contracted=True, description="Omega definition against its closed form"),
]}

LEMMA1_IDS = ("eq-R", "eq-Ric1", "eq-Ric", "eq-C", "eq-Ric3", "eq-Car")
LEMMA2_IDS = ("lemma2-gprime", "lemma2-Iprime", "lemma2-Iprime-up", "lemma2-yprime", "lemma2-hprime",
              "lemma2-eq-1", "lemma2-eq1", "lemma2-eq2", "lemma2-eq3", "lemma2-eq4")
SEC5_IDS = ("sec5-Iprime", "sec5-Cprime", "sec5-Omega")


@dataclass
class ResidualReport:
    """Per-case residuals over samples; ``trivial`` counts Riemannian 0 = 0 samples."""

    case: str
    residuals: list = field(default_factory=list)
    sample_ids: list = field(default_factory=list)
    trivial: int = 0
    notes: dict = field(default_factory=dict)
    extra_pass: bool = True

    @property
    def spec(self):
        return CASES[self.case]

    @property
    def tolerance(self):
        return self.spec.tolerance

    @property
    def max_residual(self):
        return max(self.residuals) if self.residuals else 0.0

    @property
    def median_residual(self):
        return float(np.median(self.residuals)) if self.residuals else 0.0

    @property
    def passed(self):
        return self.max_residual <= self.tolerance and self.extra_pass

    @property
    def status(self):
        if not self.residuals:
            return "trivially satisfied"
        return "pass" if self.passed else "fail"

    def add(self, sid, residual):
        self.residuals.append(float(residual))
        self.sample_ids.append(sid)

    def merge(self, other):
        self.residuals += other.residuals
        self.sample_ids += other.sample_ids
        self.trivial += other.trivial
        self.extra_pass = self.extra_pass and other.extra_pass
        for k, v in other.notes.items():
            self.notes.setdefault(k, []).extend(v if isinstance(v, list) else [v])
        return self

    def to_record(self):
        return {
            "case": self.case,
            "description": self.spec.description,
            "rung": self.spec.rung,
            "tolerance": self.tolerance,
            "status": self.status,
            "pass": self.passed,
            "max_residual": _num(self.max_residual),
            "median_residual": _num(self.median_residual),
            "samples": len(self.residuals),
            "trivial_samples": self.trivial,
            "per_sample": [{"sample": s, "residual": _num(r)} for s, r in zip(self.sample_ids, self.residuals)],
            "notes": _jsonable(self.notes),
        }


def _num(v):
    return format(float(v), ".17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# -- per-sample context ------------------------------------------------------

@dataclass
class AuditContext:
    """Time-0 data at one sample from both curvature routes."""

    spec: object
    sample: object
    cb: object
    fd: object
    mean_R: float = 0.0

    @property
    def n(self):
        return self.spec.n

    @property
    def tb(self):
        return self.cb.tensors

    @property
    def sid(self):
        return self.sample.sid

    @property
    def degenerate(self):
        return not self.tb.I_normsq > EPS_I

    @property
    def noise(self):
        return NOISE_FLOOR * float(np.max(np.abs(self.cb.Ric_ij)))

    def raise_up(self, T):
        gi = self.tb.g_inv
        return gi @ T @ gi

    def rates(self, sign=1.0, normalized=False, route="fd"):
        """(dg, dC, dlogF, dy_low) substituted from the flow at t = 0."""
        src = self.fd if route == "fd" else self.cb
        tb = self.tb
        dg = sign * (-2.0 * src.Ric_ij)
        dC = sign * (-src.Ric_ijk)
        dlogF = sign * (-self.cb.Rnorm)
        dy = sign * (-src.FR_der1)
        if normalized:
            m = sign * self.mean_R
            dg = dg + 2.0 * m * tb.g
            dC = dC + 2.0 * m * tb.C
            dlogF = dlogF + m
            dy = dy + 2.0 * m * tb.y_low
        return dg, dC, dlogF, dy


def audit_context(spec, sample, mean_R=0.0, fd=True, fd_config=DEFAULT_CURVATURE_FD):
    cb = curvature_bundle(spec, sample)
    fdc = curvature_fd(spec, sample, max_order=3, fd=fd_config) if fd else None
    return AuditContext(spec, sample, cb, fdc if fd else cb, mean_R)


def _tangent(fun, h=1e-30):
    """Exact directional derivative at t = 0 of a real-analytic ``fun(t)`` by the complex step."""
    return np.imag(fun(1j * h)) / h


def _deformed(ctx, t, rates):
    """Time-t tensors along the substituted flow: (g, g_inv, C, I, I_up, F2, y_low, h)."""
    dg, dC, dlogF, dy = rates
    tb = ctx.tb
    g = tb.g + t * dg
    gi = np.linalg.inv(g)
    C = tb.C + t * dC
    I = np.einsum("jk,ijk->i", gi, C)
    F2 = tb.F ** 2 * np.exp(2.0 * t * dlogF)
    yl = tb.y_low + t * dy
    h = g - np.outer(yl, yl) / F2
    return {"g": g, "g_inv": gi, "C": C, "I": I, "I_up": gi @ I, "F2": F2, "y_low": yl, "h": h}


def _d(ctx, rates, key_or_fn):
    fn = key_or_fn if callable(key_or_fn) else (lambda d: d[key_or_fn])
    return _tangent(lambda t: fn(_deformed(ctx, t, rates)))


def _flip_ok(ctx, key_or_fn, normalized=False):
    """Linearity probe: flipping the flow sign flips the substituted derivative."""
    a = _d(ctx, ctx.rates(1.0, normalized), key_or_fn)
    b = _d(ctx, ctx.rates(-1.0, normalized), key_or_fn)
    scale = float(np.max(np.abs(a))) + EPS_RESIDUAL
    return float(np.max(np.abs(a + b))) / scale <= LINEARITY_TOL


def _report(case, ctx, lhs, rhs, notes=None, flip=True):
    if not np.any(lhs) and not np.any(rhs):
        return _trivial(case, ctx, "both sides exactly 0")
    rep = ResidualReport(case)
    eps = EPS_RESIDUAL if CASES[case].contracted else EPS_RESIDUAL + ctx.noise
    rep.add(ctx.sid, relative_residual(lhs, rhs, eps))
    rep.extra_pass = bool(flip)
    if notes:
        rep.notes = {k: [v] for k, v in notes.items()}
    return rep


def _trivial(case, ctx, reason="Riemannian sample: both sides 0"):
    rep = ResidualReport(case, trivial=1)
    rep.notes = {"trivial": [f"{ctx.sid}: {reason}"]}
    return rep


def _I3(T, Iu):
    return float(np.einsum("ijk,i,j,k->", T, Iu, Iu, Iu))


# -- curvature identities ---------------------------------------------------

def audit_eq_R(spec, sample, ctx=None):
    """Ric_ij against R g + F^2 R_ij / 2 + R_i y_j + R_j y_i; the one-sided display is reported too."""
    ctx = ctx or audit_context(spec, sample)
    tb, cb, fd = ctx.tb, ctx.cb, ctx.fd
    R = cb.Rnorm
    base = R * tb.g + 0.5 * tb.F ** 2 * fd.R_der2
    sym = base + np.outer(fd.R_der1, tb.y_low) + np.outer(tb.y_low, fd.R_der1)
    # display as printed: R_,i y_j + R_,i y_i (second index repeated, no sum)
    one_sided = base + np.outer(fd.R_der1, tb.y_low) + (fd.R_der1 * tb.y_low)[:, None]
    lhs = cb.Ric_ij
    res_one = relative_residual(lhs, one_sided)
    res_sym = relative_residual(lhs, sym)
    form = "symmetric" if res_sym <= CASES["eq-R"].tolerance else "none"
    if res_one <= CASES["eq-R"].tolerance:
        form = "both" if form == "symmetric" else "as-printed"
    return _report("eq-R", ctx, lhs, sym, {"as_printed_residual": res_one, "matched_form": form})


def _ric1_rhs(ctx):
    tb, cb, fd = ctx.tb, ctx.cb, ctx.fd
    Rd1, Rd2 = fd.R_der1, fd.R_der2
    g, y = tb.g, tb.y_low
    return (2.0 * cb.Rnorm * tb.C + 0.5 * tb.F ** 2 * fd.R_der3
            + np.einsum("jk,i->ijk", g, Rd1) + np.einsum("ij,k->ijk", g, Rd1) + np.einsum("ki,j->ijk", g, Rd1)
            + np.einsum("jk,i->ijk", Rd2, y) + np.einsum("ij,k->ijk", Rd2, y) + np.einsum("ki,j->ijk", Rd2, y))


def audit_eq_Ric1_and_Ric(spec, sample, ctx=None):
    """Full third-order identity and its I^3 contraction; returns two reports."""
    ctx = ctx or audit_context(spec, sample)
    lhs = ctx.cb.Ric_ijk
    full = _report("eq-Ric1", ctx, lhs, _ric1_rhs(ctx))
    if ctx.degenerate:
        return [full, _trivial("eq-Ric", ctx)]
    tb, cb, fd = ctx.tb, ctx.cb, ctx.fd
    Iu = tb.I_up
    rhs = (2.0 * cb.Rnorm * _I3(tb.C, Iu) + 0.5 * tb.F ** 2 * _I3(fd.R_der3, Iu)
           + 3.0 * tb.I_normsq * float(Iu @ fd.R_der1))
    return [full, _report("eq-Ric", ctx, _I3(lhs, Iu), rhs)]


def coefficient_match(kappa_value, p, q, n, tol=COEFFICIENT_MATCH_TOL):
    """Names of the closed-form coefficients within ``tol`` (relative) of kappa."""
    out = {}
    for name, fn in COEFFICIENTS.items():
        c = fn(p, q, n)
        out[name] = (c, abs(kappa_value - c) / (abs(kappa_value) + abs(c) + EPS_RESIDUAL))
    matched = [k for k, (_, r) in out.items() if r <= tol]
    return matched, out


def audit_eq_C_coefficient(spec, sample, ctx=None, bundle=None):
    """kappa = C(I,I,I)/|I|^4 against both coefficients, (p, q) by least squares."""
    if bundle is None:
        ctx = ctx or audit_context(spec, sample, fd=False)
        bundle, sid = ctx.tb, ctx.sid
    else:
        sid = getattr(sample, "sid", "synthetic")
    n = bundle.n
    rep = ResidualReport("eq-C")
    try:
        p, q, resid = semi_c_lsq(bundle, n)
    except RiemannianDegenerate:
        rep.trivial = 1
        rep.notes = {"trivial": [f"{sid}: Riemannian sample"]}
        return rep
    Iu = bundle.I_up
    k = _I3(bundle.C, Iu) / bundle.I_normsq ** 2
    matched, detail = coefficient_match(k, p, q, n)
    # the case residual is the best match; exactly one coefficient should match unless q = 1
    best = min(r for _, r in detail.values())
    rep.add(sid, best)
    rep.extra_pass = len(matched) >= 1
    rep.notes = {
        "kappa": [k], "p": [p], "q": [q], "decomposition_residual": [resid],
        "printed_coefficient": [detail["printed"][0]], "direct_coefficient": [detail["direct"][0]],
        "matched": [",".join(matched) if matched else "none"],
    }
    return rep


def audit_eq_Ric3(spec, sample, ctx=None, coefficient="direct"):
    """C' I^3 = -2R coef |I|^4 - F^2 R_ijk I^3 / 2 - 3 |I|^2 I.dR with the confirmed coefficient."""
    ctx = ctx or audit_context(spec, sample)
    if ctx.degenerate:
        return _trivial("eq-Ric3", ctx)
    tb, cb = ctx.tb, ctx.cb
    p, q, resid = semi_c_lsq(tb, ctx.n)
    Iu = tb.I_up
    lhs = -_I3(ctx.fd.Ric_ijk, Iu)
    tail = -0.5 * tb.F ** 2 * _I3(cb.R_der3, Iu) - 3.0 * tb.I_normsq * float(Iu @ cb.R_der1)
    rhs = {name: -2.0 * cb.Rnorm * fn(p, q, ctx.n) * tb.I_normsq ** 2 + tail for name, fn in COEFFICIENTS.items()}
    other = [k for k in rhs if k != coefficient][0]
    return _report("eq-Ric3", ctx, lhs, rhs[coefficient],
                   {"coefficient": coefficient, f"{other}_residual": relative_residual(lhs, rhs[other]),
                    "decomposition_residual": resid})


def audit_eq_Car(spec, sample, ctx=None):
    """C' from the vertical derivative of g' (finite differences) against -Ric_ij,k (Taylor)."""
    ctx = ctx or audit_context(spec, sample)
    dg, dC, _, _ = ctx.rates(route="fd")
    return _report("eq-Car", ctx, dC, -ctx.cb.Ric_ijk, flip=_flip_ok(ctx, "C"))


# -- variation chain along the flow -----------------------------------------

def _ric_up(ctx):
    return ctx.raise_up(ctx.cb.Ric_ij)


def audit_lemma2_chain(spec, sample, ctx=None):
    """One report per link of the variation chain for g^ij, I, y_i, h_ij and the Cartan blocks."""
    ctx = ctx or audit_context(spec, sample)
    tb, cb = ctx.tb, ctx.cb
    n = ctx.n
    rates = ctx.rates()
    Ric = cb.Ric_ij
    RicU = _ric_up(ctx)
    rho_up = tb.g_inv @ cb.rho_i
    ell_up = tb.y / tb.F
    reps = []

    lhs = _d(ctx, rates, "g_inv")
    reps.append(_report("lemma2-gprime", ctx, lhs, 2.0 * RicU, flip=_flip_ok(ctx, "g_inv")))

    lhs = _d(ctx, rates, "I")
    reps.append(_report("lemma2-Iprime", ctx, lhs, -cb.rho_i, flip=_flip_ok(ctx, "I")))

    lhs = _d(ctx, rates, "I_up")
    reps.append(_report("lemma2-Iprime-up", ctx, lhs, 2.0 * RicU @ tb.I - rho_up, flip=_flip_ok(ctx, "I_up")))

    lhs = _d(ctx, rates, "y_low")
    reps.append(_report("lemma2-yprime", ctx, lhs, -2.0 * Ric @ tb.y, flip=_flip_ok(ctx, "y_low")))

    lam = _Lambda(Ric, tb.ell, ell_up)
    rhs_h = 2.0 * cb.Rnorm * tb.h - 2.0 * cb.Rnorm * tb.g - 2.0 * Ric + 2.0 * lam
    lhs = _d(ctx, rates, "h")
    reps.append(_report("lemma2-hprime", ctx, lhs, rhs_h, flip=_flip_ok(ctx, "h")))

    if ctx.degenerate:
        for cid in ("lemma2-eq-1", "lemma2-eq1", "lemma2-eq2", "lemma2-eq3", "lemma2-eq4"):
            reps.append(_trivial(cid, ctx))
        return reps

    Iu, I, N2 = tb.I_up, tb.I, tb.I_normsq
    rho = cb.rho_i
    rhoI = float(rho @ Iu)
    RicII = float(Iu @ Ric @ Iu)
    rho_sym = np.einsum("i,j,k->ijk", rho, I, I) + np.einsum("j,i,k->ijk", rho, I, I) + np.einsum("k,i,j->ijk", rho, I, I)
    T = lambda d: np.einsum("i,j,k->ijk", d["I"], d["I"], d["I"]) / (d["I"] @ d["I_up"])
    dT = _d(ctx, rates, T)
    dN2 = float(_d(ctx, rates, lambda d: d["I"] @ d["I_up"]))
    # as printed: C_ijk where I_i I_j I_k / |I|^2 is expected
    rhs_m1 = -dN2 / N2 * tb.C - rho_sym / N2
    corrected_m1 = -dN2 / N2 * np.einsum("i,j,k->ijk", I, I, I) / N2 - rho_sym / N2
    reps.append(_report("lemma2-eq-1", ctx, dT, rhs_m1,
                        {"corrected_form_residual": relative_residual(dT, corrected_m1)}, flip=_flip_ok(ctx, T)))

    lhs = _I3(dT, Iu)
    q0 = _fit_q(tb, n)
    closed = 2.0 * (rhoI - RicII)
    rhs_1a = -((n * q0 + 1.0) * dN2 / ((n + 1.0) * N2) + 3.0 * rhoI) * N2
    rhs_1b = ((n * q0 + 1.0) * closed / ((n + 1.0) * N2) - 3.0 * rhoI) * N2
    corrected_1 = -(dN2 + 3.0 * rhoI) * N2
    reps.append(_report("lemma2-eq1", ctx, lhs, rhs_1b, {
        "first_line_residual": relative_residual(lhs, rhs_1a),
        "corrected_form_residual": relative_residual(lhs, corrected_1),
        "dN2_closed_form_residual": relative_residual(dN2, -closed),
        "q": q0,
    }, flip=_flip_ok(ctx, T)))

    H = lambda d: h_sym(d["h"], d["I"])
    dH = _d(ctx, rates, H)
    g = tb.g
    sym = lambda A, v: np.einsum("i,jk->ijk", v, A) + np.einsum("j,ik->ijk", v, A) + np.einsum("k,ij->ijk", v, A)
    rhs_2 = (-sym(tb.h, rho) - 2.0 * cb.Rnorm * sym(g, I) - 2.0 * sym(Ric, I)
             + 2.0 * cb.Rnorm * sym(tb.h, I) + 2.0 * sym(lam, I))
    reps.append(_report("lemma2-eq2", ctx, dH, rhs_2, flip=_flip_ok(ctx, H)))

    rhs_3 = -3.0 * (rhoI + 2.0 * RicII) * N2
    reps.append(_report("lemma2-eq3", ctx, _I3(dH, Iu), rhs_3, flip=_flip_ok(ctx, H)))

    # algebraic identity in (p', q') with p' = -q'; checked at unit rate
    qd = 1.0
    lhs_4 = _I3(-qd / (1.0 + n) * h_sym(tb.h, I) + qd * np.einsum("i,j,k->ijk", I, I, I) / N2, Iu)
    rhs_4 = n * qd / (1.0 + n) * N2 ** 2
    reps.append(_report("lemma2-eq4", ctx, lhs_4, rhs_4,
                        {"corrected_coefficient_residual": relative_residual(lhs_4, (n - 2.0) * qd / (n + 1.0) * N2 ** 2)}))
    return reps


def _Lambda(Ric, ell, ell_up):
    v = Ric @ ell_up
    return np.outer(v, ell) + np.outer(ell, v)


def _fit_q(bundle, n):
    try:
        return semi_c_fit(bundle, n).q
    except (RiemannianDegenerate, FitIllPosed):
        return 0.0


def probe_qprime(g, C, y, dg, dC, n, dt_probe):
    """q' by central difference of the fitted q along the linearized deformation (g + t dg, C + t dC)."""
    qs = []
    for s in (1.0, -1.0):
        gs = g + s * dt_probe * dg
        if np.linalg.eigvalsh(gs).min() <= 0:
            raise ProbeStepInvalid(f"deformed g_y not positive definite at t = {s * dt_probe:g}")
        try:
            qs.append(semi_c_fit(bundle_from(gs, C + s * dt_probe * dC, y), n).q)
        except RiemannianDegenerate as exc:
            raise ProbeStepInvalid(f"deformed sample degenerate: {exc}") from exc
    return (qs[0] - qs[1]) / (2.0 * dt_probe)


def final_display(n, p, q, qprime, N2, rhoI, RicII):
    """Closed form of C'(I,I,I) as printed, and the same block algebra with corrected coefficients."""
    printed = (n * qprime / (n + 1.0) * N2
               - q * (2.0 * (n * q + 1.0) * (rhoI - RicII) / ((n + 1.0) * N2) - 3.0 * rhoI)
               - 3.0 * p / (n + 1.0) * (rhoI + 2.0 * RicII)) * N2
    dN2 = 2.0 * (RicII - rhoI)
    corrected = ((n - 2.0) * qprime / (n + 1.0) * N2 - q * (dN2 + 3.0 * rhoI)
                 - 3.0 * p / (n + 1.0) * (rhoI + 2.0 * RicII)) * N2
    return printed, corrected


def audit_lemma2_final(spec, sample, dt_probe=1e-4, ctx=None):
    ctx = ctx or audit_context(spec, sample)
    if ctx.degenerate:
        return _trivial("lemma2-final", ctx)
    tb, cb = ctx.tb, ctx.cb
    n = ctx.n
    fit = semi_c_fit(tb, n)

    def side(sign):
        dg, dC, _, _ = ctx.rates(sign)
        qp = probe_qprime(tb.g, tb.C, tb.y, dg, dC, n, dt_probe)
        lhs = _I3(dC, tb.I_up)
        return qp, lhs

    qp, lhs = side(1.0)
    qm, lhsm = side(-1.0)
    flip = abs(qp + qm) <= LINEARITY_TOL * (abs(qp) + 1e-300) + 1e-15 and abs(lhs + lhsm) <= LINEARITY_TOL * abs(lhs) + 1e-300
    Iu = tb.I_up
    printed, corrected = final_display(n, fit.p, fit.q, qp, tb.I_normsq, float(cb.rho_i @ Iu),
                                       float(Iu @ cb.Ric_ij @ Iu))
    return _report("lemma2-final", ctx, lhs, printed, {
        "qprime": qp, "q": fit.q, "corrected_form_residual": relative_residual(lhs, corrected),
        "ratio_CpI3_over_normsq": lhs / tb.I_normsq, "I_norm": tb.I_norm,
    }, flip=flip)


def divisibility_witness(spec, x0, y, scales=(1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125)):
    """Slope of log|C'(I,I,I)/|I|^2| against log|I| along x = s x0; bounded ratio needs slope >= 0.

    Returns (slope, list of (|I|, ratio)).
    """
    pts = []
    for s in scales:
        smp = spec.make_sample(tuple(s * np.asarray(x0, float)), tuple(y), f"witness-{s:g}")
        cb = curvature_bundle(spec, smp)
        tb = cb.tensors
        if not tb.I_normsq > EPS_I:
            continue
        ratio = -_I3(cb.Ric_ijk, tb.I_up) / tb.I_normsq
        pts.append((tb.I_norm, ratio))
    if len(pts) < 3:
        raise RiemannianDegenerate("divisibility witness needs at least three non-Riemannian samples")
    a = np.log([p[0] for p in pts])
    r = np.log(np.abs([p[1] for p in pts]) + 1e-300)
    return float(np.polyfit(a, r, 1)[0]), pts


def synthetic_semi_c(n=3, q0=0.4, qdot=0.3, seed=0):
    """Semi-C tensors along t with q(t) = q0 + qdot t over a moving metric.

    Returns ``(make, y)`` where ``make(t)`` gives (g, C) at time t (complex t allowed).
    """
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    g0 = A @ A.T + n * np.eye(n)
    B = rng.normal(size=(n, n))
    dg = 0.1 * (B + B.T)
    y = rng.normal(size=n)
    J0 = rng.normal(size=n)
    dJ = rng.normal(size=n)

    def make(t):
        g = g0 + t * dg
        yl = g @ y
        F2 = y @ yl
        # project J onto the g-orthogonal complement of y so that I . y = 0
        J = (J0 + t * dJ)
        J = J - (J @ y) / F2 * yl
        gi = np.linalg.inv(g)
        h = g - np.outer(yl, yl) / F2
        N2 = J @ gi @ J
        q = q0 + qdot * t
        p = 1.0 - q
        C = p / (1.0 + n) * h_sym(h, J) + q * np.einsum("i,j,k->ijk", J, J, J) / N2
        return g, C

    return make, y


def synthetic_qprime_roundtrip(n=3, q0=0.4, qdot=0.3, seed=0, dt_probe=1e-4):
    """Recovered q' against the constructed rate; returns (estimate, constructed)."""
    make, y = synthetic_semi_c(n, q0, qdot, seed)
    g0, C0 = make(0.0)
    dg = _tangent(lambda t: make(t)[0])
    dC = _tangent(lambda t: make(t)[1])
    return probe_qprime(g0, C0, y, dg, dC, n, dt_probe), qdot


def synthetic_bundle(n=3, q=0.4, seed=0):
    make, y = synthetic_semi_c(n, q, 0.0, seed)
    g, C = make(0.0)
    return bundle_from(g, C, y)


# -- normalized flow ---------------------------------------------------------

def audit_sec5_normalized(spec, sample, mean_R, ctx=None):
    """<R>-cancellation in I', the C' contraction with Omega, and Omega's closed form."""
    ctx = ctx or audit_context(spec, sample, mean_R=mean_R)
    ctx.mean_R = mean_R
    if ctx.degenerate:
        reps = [_trivial(c, ctx) for c in SEC5_IDS]
        reps[0].notes["mean_R"] = [mean_R]
        return reps
    tb, cb = ctx.tb, ctx.cb
    rates_n = ctx.rates(normalized=True)
    rates_u = ctx.rates()
    dI_n = _d(ctx, rates_n, "I")
    dI_u = _d(ctx, rates_u, "I")
    r1 = _report("sec5-Iprime", ctx, dI_n, -cb.rho_i,
                 {"normalized_vs_unnormalized": relative_residual(dI_n, dI_u), "mean_R": mean_R},
                 flip=_flip_ok(ctx, "I", normalized=True))

    Iu, N2 = tb.I_up, tb.I_normsq
    dN2 = float(_d(ctx, rates_n, lambda d: d["I"] @ d["I_up"]))
    omega = -dN2 / N2
    lhs = _I3(rates_n[1], Iu)
    rhs = (omega * N2 - 3.0 * float(cb.rho_i @ Iu)) * N2
    r2 = _report("sec5-Cprime", ctx, lhs, rhs, {"Omega": omega}, flip=_flip_ok(ctx, "C", normalized=True))

    RicII = float(Iu @ cb.Ric_ij @ Iu)
    closed = (2.0 * float(cb.rho_i @ Iu) - 2.0 * RicII) / N2 + 2.0 * mean_R
    r3 = _report("sec5-Omega", ctx, omega, closed)
    return [r1, r2, r3]


# -- orchestration -----------------------------------------------------------

ALL_IDS = LEMMA1_IDS + ("lemma2-final",) + LEMMA2_IDS + SEC5_IDS


def audit_sample(spec, sample, cases=ALL_IDS, mean_R=0.0, dt_probe=1e-4, fd_config=DEFAULT_CURVATURE_FD):
    """All requested cases at one sample; returns {case: ResidualReport}."""
    need_fd = any(c != "eq-C" for c in cases)
    ctx = audit_context(spec, sample, mean_R=mean_R, fd=need_fd, fd_config=fd_config)
    out = []
    if "eq-R" in cases:
        out.append(audit_eq_R(spec, sample, ctx))
    if "eq-Ric1" in cases or "eq-Ric" in cases:
        out += audit_eq_Ric1_and_Ric(spec, sample, ctx)
    if "eq-C" in cases:
        out.append(audit_eq_C_coefficient(spec, sample, ctx))
    if "eq-Ric3" in cases:
        out.append(audit_eq_Ric3(spec, sample, ctx))
    if "eq-Car" in cases:
        out.append(audit_eq_Car(spec, sample, ctx))
    if any(c in cases for c in LEMMA2_IDS):
        out += audit_lemma2_chain(spec, sample, ctx)
    if "lemma2-final" in cases:
        try:
            out.append(audit_lemma2_final(spec, sample, dt_probe, ctx))
        except ProbeStepInvalid as exc:
            rep = ResidualReport("lemma2-final", notes={"probe_invalid": [f"{sample.sid}: {exc}"]})
            rep.add(sample.sid, float("inf"))
            out.append(rep)
    if any(c in cases for c in SEC5_IDS):
        out += audit_sec5_normalized(spec, sample, mean_R, ctx)
    return {r.case: r for r in out if r.case in cases}


def merge_reports(per_sample):
    merged = {}
    for d in per_sample:
        for case, rep in d.items():
            if case in merged:
                merged[case].merge(rep)
            else:
                merged[case] = ResidualReport(case).merge(rep)
    return merged


def run_audit(spec, samples, cases=ALL_IDS, mean_R=0.0, dt_probe=1e-4, fd_config=DEFAULT_CURVATURE_FD):
    """Audit every sample; merged reports in case order."""
    per = map_samples(lambda s: audit_sample(spec, s, cases, mean_R, dt_probe, fd_config), samples)
    merged = merge_reports(per)
    if "eq-C" in merged:
        majority_note(merged["eq-C"])
    return {c: merged[c] for c in cases if c in merged}


def majority_note(rep):
    """Record which coefficient matched and on what fraction of eligible samples."""
    matched = rep.notes.get("matched", [])
    if not matched:
        return None, 0.0
    counts = {}
    for m in matched:
        counts[m] = counts.get(m, 0) + 1
    best = max(counts, key=counts.get)
    frac = counts[best] / len(matched)
    rep.notes["majority"] = best
    rep.notes["majority_fraction"] = frac
    return best, frac


def summary_rows(reports):
    return [(r.case, _num(r.max_residual), r.spec.rung, r.status) for r in reports.values()]


def reports_json(reports, header):
    return {case: json.loads(json.dumps({"header": header, **rep.to_record()})) for case, rep in reports.items()}


def audit_header(extra=None):
    from . import __version__

    h = {"version": __version__, "convention": CONVENTION, "ladder": LADDER, "eps_residual": EPS_RESIDUAL}
    if extra:
        h.update(extra)
    return h
