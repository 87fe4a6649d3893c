"""End-to-end acceptance criteria, one test per criterion, each with its runtime budget."""
import math
import time

import numpy as np
import pytest

from finslerflow.audit import CASES, LADDER, run_audit, synthetic_qprime_roundtrip
from finslerflow.curvature import christoffel_oracle, curvature_bundle, einstein_diagnostic
from finslerflow.errors import RiemannianDegenerate
from finslerflow.flow import (
    FlowConfig,
    ParametricFamily,
    SMQuadratureSpec,
    constant_curvature_oracle,
    extinction_time,
    observed_order,
    run_flow,
)
from finslerflow.jets import ORACLE_FD, mixed_jet
from finslerflow.metric import FIXTURES, fixture, random_samples, sample_lattice
from finslerflow.tensors import compute_bundle, semi_c_fit

pytestmark = pytest.mark.acceptance

QUAD = SMQuadratureSpec(directions_per_fiber=4, grid=(1, 1, 1))


def _scaled(a, b, scale):
    # residual of a against b, relative to a per-sample scale that is never 0
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) / scale


def test_criterion_1_homogeneity_and_structure(accept):
    t0 = time.perf_counter()
    worst = 0.0
    for name in FIXTURES:
        spec = fixture(name)
        for s in random_samples(spec, 500, seed=101):
            b = compute_bundle(spec, s)
            y = s.ya
            ny = np.linalg.norm(y)
            gs = float(np.abs(b.g).max())
            # C and I carry 1/F; Riemannian fixtures have C = 0 so their scale is that of g
            cs = max(float(np.abs(b.C).max()), gs / b.F)
            Is = max(float(np.abs(b.I).max()), gs / b.F)
            res = [
                _scaled(np.einsum("ijk,k->ij", b.C, y), 0.0, cs * ny),
                abs(b.I @ y) / (Is * ny),
                _scaled(b.h @ b.I_up, b.I, Is),
            ]
            for lam in (0.5, 3.0):
                bl = compute_bundle(spec, spec.make_sample(s.x, lam * y))
                res += [
                    abs(bl.F - lam * b.F) / (lam * b.F),
                    _scaled(bl.g, b.g, gs),
                    _scaled(lam * bl.C, b.C, cs),
                    _scaled(lam * bl.I, b.I, Is),
                ]
            worst = max(worst, max(res))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and dt <= 30.0
    accept(1, ok, f"max residual {worst:.2e} (<= 1e-9), {dt:.1f} s (<= 30 s)")
    assert ok


def test_criterion_2_riemannian_reduction(accept):
    t0 = time.perf_counter()
    spec = fixture("FIX-SPHERE", n=3, r=1.0)
    worst_ric = worst_R = 0.0
    for s in random_samples(spec, 200, seed=102):
        cb = curvature_bundle(spec, s, derivatives=False)
        _, ricci = christoffel_oracle(spec.alpha, s.xa)
        classical = s.ya @ ricci @ s.ya
        worst_ric = max(worst_ric, abs(cb.Ric - classical) / abs(classical))
        worst_R = max(worst_R, abs(cb.Rnorm - 2.0))
    dt = time.perf_counter() - t0
    ok = worst_ric <= 1e-4 and worst_R <= 1e-4 and dt <= 60.0
    accept(2, ok, f"Ric vs Christoffel {worst_ric:.2e} (<= 1e-4), |Rnorm-2| {worst_R:.2e} (<= 1e-4), "
                  f"{dt:.1f} s (<= 60 s)")
    assert ok


def test_criterion_3_c_reducibility(accept):
    t0 = time.perf_counter()
    worst_q = worst_res = 0.0
    fits = skipped = 0
    for name in ("FIX-MINK-RANDERS", "FIX-KROPINA"):
        spec = fixture(name)
        for s in random_samples(spec, 500, seed=103):
            try:
                fit = semi_c_fit(compute_bundle(spec, s), 3)
            except RiemannianDegenerate:
                skipped += 1
                continue
            fits += 1
            worst_q = max(worst_q, abs(fit.q))
            worst_res = max(worst_res, fit.decomposition_residual)
    dt = time.perf_counter() - t0
    ok = fits > 0 and worst_q <= 1e-6 and worst_res <= 1e-8 and dt <= 30.0
    accept(3, ok, f"{fits} fits ({skipped} not fit-eligible), max|q| {worst_q:.2e} (<= 1e-6), "
                  f"residual {worst_res:.2e} (<= 1e-8), {dt:.1f} s (<= 30 s)")
    assert ok


def test_criterion_4_lemma1_audit(accept):
    t0 = time.perf_counter()
    spec = fixture("FIX-RANDERS-VAR")
    reps = run_audit(spec, random_samples(spec, 100, seed=104), ("eq-R", "eq-Ric1", "eq-Ric", "eq-C"))
    dt = time.perf_counter() - t0
    c = reps["eq-C"]
    # one entry per sample: the matching coefficient names, comma joined
    unique = all(m != "none" and "," not in m for m in c.notes["matched"])
    frac = c.notes["majority_fraction"]
    parts = [f"{k} {reps[k].max_residual:.1e}/{CASES[k].tolerance:.0e}" for k in ("eq-R", "eq-Ric1", "eq-Ric")]
    ok = (all(reps[k].status == "pass" for k in ("eq-R", "eq-Ric1", "eq-Ric"))
          and unique and frac >= 0.95 and dt <= 120.0)
    accept(4, ok, f"{', '.join(parts)}; eq-C unique match={unique}, '{c.notes['majority']}' on "
                  f"{100 * frac:.0f}% (>= 95%), {dt:.1f} s (<= 120 s)")
    assert ok


LEMMA2_LINKS = ("lemma2-gprime", "lemma2-Iprime", "lemma2-Iprime-up", "lemma2-yprime", "lemma2-hprime",
                "lemma2-eq1", "lemma2-eq3")


def test_criterion_5_lemma2_audit(accept):
    t0 = time.perf_counter()
    spec = fixture("FIX-RANDERS-VAR")
    reps = run_audit(spec, random_samples(spec, 100, seed=105), LEMMA2_LINKS + ("lemma2-final",))
    est, exact = synthetic_qprime_roundtrip()
    dt = time.perf_counter() - t0
    links_ok = all(reps[k].max_residual <= LADDER["order3"] and reps[k].status == "pass" for k in LEMMA2_LINKS)
    final_ok = reps["lemma2-final"].max_residual <= LADDER["probe"]
    rt_ok = abs(est - exact) <= 1e-4
    failing = [f"{k} {reps[k].max_residual:.2e}" for k in LEMMA2_LINKS if reps[k].status != "pass"]
    ok = links_ok and final_ok and rt_ok and dt <= 180.0
    accept(5, ok, f"links pass={links_ok} (failing: {', '.join(failing) or 'none'}); "
                  f"final {reps['lemma2-final'].max_residual:.2e} (<= 5e-3); "
                  f"q' round trip err {abs(est - exact):.1e} (<= 1e-4); {dt:.1f} s (<= 180 s)")
    assert ok


def test_criterion_6_flow_against_closed_form(accept):
    t0 = time.perf_counter()
    fam = ParametricFamily.conformal(fixture("FIX-SPHERE", n=3, r=1.0))
    trace = run_flow(fam, FlowConfig("unnormalized", 1e-3, 400, "rk4", QUAD))
    c01 = trace.theta_at(0.1)[0]
    err_c = abs(c01 - constant_curvature_oracle(3, 1.0, 0.1))
    err_T = abs(trace.extinction_estimate - extinction_time(3, 1.0))
    # order is measured where rk4 is not exact: theta = log c evolves nonlinearly
    log_fam = ParametricFamily.log_conformal(fixture("FIX-SPHERE"))
    dts = [4e-3, 2e-3, 1e-3]
    errs = []
    for h in dts:
        tr = run_flow(log_fam, FlowConfig("unnormalized", h, round(0.1 / h), "rk4", QUAD))
        errs.append(abs(tr.theta_at(0.1)[0] - math.log(0.6)))
    order = observed_order(errs, dts)
    dt = time.perf_counter() - t0
    ok = err_c <= 1e-6 and trace.status == "extinct" and err_T <= 1e-3 and abs(order - 4.0) <= 0.3 and dt <= 60.0
    accept(6, ok, f"|c(0.1)-0.6| {err_c:.1e} (<= 1e-6), extinction {trace.extinction_estimate:.6f} "
                  f"(0.25 +- 1e-3), rk4 order {order:.3f} (4 +- 0.3), {dt:.1f} s (<= 60 s)")
    assert ok


def test_criterion_7_normalized_fixed_point(accept):
    t0 = time.perf_counter()
    fam = ParametricFamily.conformal(fixture("FIX-SPHERE"))
    trace = run_flow(fam, FlowConfig("normalized", 1e-2, 50, "rk4", QUAD))
    drift = float(np.abs(trace.thetas[:, 0] - 1.0).max())
    t_end = trace.times[-1]
    sphere = fixture("FIX-SPHERE")
    var = fixture("FIX-RANDERS-VAR")
    dev_s = einstein_diagnostic(sphere, sample_lattice(sphere, 8)).max_rel_deviation
    dev_v = einstein_diagnostic(var, sample_lattice(var, 8)).max_rel_deviation
    dt = time.perf_counter() - t0
    ok = (trace.status == "completed" and t_end >= 0.5 - 1e-12 and drift <= 1e-8
          and dev_s <= 1e-5 and dev_v >= 1e-2 and dt <= 60.0)
    accept(7, ok, f"max|c-1| on [0, {t_end:.2f}] {drift:.1e} (<= 1e-8), sphere deviation {dev_s:.1e} (<= 1e-5), "
                  f"RANDERS-VAR deviation {dev_v:.2e} (>= 1e-2), {dt:.1f} s (<= 60 s)")
    assert ok


def test_criterion_8_dual_path_differentiation(accept):
    t0 = time.perf_counter()
    worst = 0.0
    where = None
    for name in FIXTURES:
        spec = fixture(name)
        for s in random_samples(spec, 50, seed=1):
            T = mixed_jet(spec.F2, s.x, s.y, 2, 3, "taylor")
            D = mixed_jet(spec.F2, s.x, s.y, 2, 3, "finite_difference", ORACLE_FD, spec.in_domain)
            for k in T:
                tol = np.maximum(1e-6 * np.abs(T[k]), 1e-8)
                r = float(np.max(np.abs(T[k] - D[k]) / tol))
                if r > worst:
                    worst, where = r, (name, k)
    dt = time.perf_counter() - t0
    ok = worst <= 1.0 and dt <= 60.0
    accept(8, ok, f"worst |taylor-fd|/tol {worst:.3f} (<= 1) at {where}, {dt:.1f} s (<= 60 s)")
    assert ok
