import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from finslerflow import audit
from finslerflow.audit import (
    ALL_IDS,
    CASES,
    LADDER,
    LEMMA1_IDS,
    ResidualReport,
    audit_context,
    audit_eq_C_coefficient,
    audit_sample,
    coefficient_match,
    divisibility_witness,
    final_display,
    probe_qprime,
    relative_residual,
    reports_json,
    run_audit,
    synthetic_bundle,
    synthetic_qprime_roundtrip,
    synthetic_semi_c,
)
from finslerflow.errors import ProbeStepInvalid
from finslerflow.metric import fixture, random_samples
from finslerflow.tensors import COEFFICIENTS


@pytest.fixture(scope="module")
def randers_var_reports():
    spec = fixture("FIX-RANDERS-VAR")
    samples = random_samples(spec, 3, seed=21)
    return run_audit(spec, samples, mean_R=0.3)


@pytest.fixture(scope="module")
def sphere_reports():
    spec = fixture("FIX-SPHERE")
    return run_audit(spec, random_samples(spec, 2, seed=22), mean_R=2.0)


def test_relative_residual():
    assert relative_residual(0.0, 0.0) == 0.0
    assert relative_residual([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_residual(1.0, -1.0) == pytest.approx(1.0)
    assert relative_residual(1.0, 1.0 + 1e-6) == pytest.approx(5e-7, rel=1e-6)


def test_ladder_assignment():
    assert LADDER == {"order2": 1e-4, "order3": 1e-3, "probe": 5e-3}
    assert CASES["eq-R"].tolerance == 1e-4
    assert CASES["eq-Ric1"].tolerance == 1e-3
    assert CASES["lemma2-final"].tolerance == 5e-3
    assert set(ALL_IDS) == set(CASES)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 7), st.floats(-0.9, 0.9), st.integers(0, 5000))
def test_coefficient_audit_identifies_the_direct_coefficient(n, q, seed):
    rep = audit_eq_C_coefficient(None, None, bundle=synthetic_bundle(n, q, seed))
    assert rep.notes["matched"] == ["direct"]
    assert rep.notes["q"][0] == pytest.approx(q, abs=1e-8)
    assert rep.passed


def test_coefficients_coincide_only_at_q_one():
    for n in (3, 4, 5):
        matched, _ = coefficient_match(COEFFICIENTS["direct"](0.0, 1.0, n), 0.0, 1.0, n)
        assert sorted(matched) == ["direct", "printed"]
        matched, _ = coefficient_match(COEFFICIENTS["direct"](0.6, 0.4, n), 0.6, 0.4, n)
        assert matched == ["direct"]


def test_qprime_round_trip():
    est, exact = synthetic_qprime_roundtrip()
    assert est == pytest.approx(exact, abs=1e-4)
    est, exact = synthetic_qprime_roundtrip(n=5, q0=-0.2, qdot=-1.1, seed=3)
    assert est == pytest.approx(exact, abs=1e-4)


def test_probe_rejects_indefinite_step():
    make, y = synthetic_semi_c(3, 0.4, 0.3, 0)
    g, C = make(0.0)
    with pytest.raises(ProbeStepInvalid):
        probe_qprime(g, C, y, -1e6 * np.eye(3), np.zeros_like(C), 3, 1e-4)


def test_lemma1_on_variable_randers(randers_var_reports):
    reps = randers_var_reports
    for cid in ("eq-R", "eq-Ric1", "eq-Ric", "eq-C", "eq-Ric3", "eq-Car"):
        assert reps[cid].status == "pass", (cid, reps[cid].max_residual)
    assert reps["eq-C"].notes["majority"] == "direct"
    assert reps["eq-C"].notes["majority_fraction"] == 1.0
    # the one-sided display of eq-R does not hold
    assert min(reps["eq-R"].notes["as_printed_residual"]) > LADDER["order2"]
    assert min(reps["eq-Ric3"].notes["printed_residual"]) > LADDER["order3"]


def test_lemma2_determined_links(randers_var_reports):
    reps = randers_var_reports
    for cid in ("lemma2-gprime", "lemma2-Iprime", "lemma2-Iprime-up", "lemma2-yprime", "lemma2-hprime",
                "lemma2-eq2", "lemma2-eq3"):
        assert reps[cid].status == "pass", (cid, reps[cid].max_residual)
        assert reps[cid].extra_pass


def test_flawed_displays_are_flagged_with_corrections(randers_var_reports):
    reps = randers_var_reports
    for cid in ("lemma2-eq-1", "lemma2-eq1"):
        assert reps[cid].status == "fail"
        assert max(reps[cid].notes["corrected_form_residual"]) <= LADDER["order3"]
    eq4 = reps["lemma2-eq4"]
    assert eq4.status == "fail"
    assert max(eq4.notes["corrected_coefficient_residual"]) <= 1e-12
    final = reps["lemma2-final"]
    assert final.max_residual > LADDER["probe"]
    assert max(final.notes["corrected_form_residual"]) <= LADDER["probe"]


def test_normalized_flow_cases(randers_var_reports):
    reps = randers_var_reports
    assert reps["sec5-Iprime"].status == "pass"
    assert reps["sec5-Omega"].status == "pass"


def test_riemannian_samples_are_trivial(sphere_reports):
    reps = sphere_reports
    for cid in ("eq-Ric", "eq-C", "eq-Ric3", "lemma2-eq1", "lemma2-final", "sec5-Cprime"):
        assert reps[cid].status == "trivially satisfied"
        assert reps[cid].trivial == 2
    for cid in ("eq-R", "eq-Ric1", "eq-Car", "lemma2-gprime", "lemma2-Iprime", "lemma2-hprime"):
        assert reps[cid].status == "pass", (cid, reps[cid].max_residual)


def test_minkowski_randers_is_flat_and_c_reducible():
    spec = fixture("FIX-MINK-RANDERS")
    s = random_samples(spec, 1, seed=4)[0]
    reps = audit_sample(spec, s, LEMMA1_IDS)
    assert reps["eq-C"].notes["q"][0] == pytest.approx(0.0, abs=1e-9)
    for cid in ("eq-R", "eq-Ric1", "eq-Car"):
        assert reps[cid].max_residual <= 1e-12


def test_linearity_probe_on_tangents():
    ctx = audit_context(fixture("FIX-RANDERS-VAR"), random_samples(fixture("FIX-RANDERS-VAR"), 1, seed=5)[0])
    assert audit._flip_ok(ctx, "C")
    assert audit._flip_ok(ctx, lambda d: d["g_inv"])
    # a map quadratic in the deformation has zero tangent at t = 0
    sq = audit._d(ctx, ctx.rates(), lambda d: np.sum((d["g"] - ctx.tb.g) ** 2))
    assert abs(sq) <= 1e-12


def test_final_display_blocks_agree_when_coefficients_do():
    # with q = q' = 0 both forms reduce to the same h-block
    printed, corrected = final_display(3, 1.0, 0.0, 0.0, 2.0, 0.3, 0.7)
    assert printed == pytest.approx(corrected)


def test_divisibility_witness_on_variable_randers():
    slope, pts = divisibility_witness(fixture("FIX-RANDERS-VAR"), (0.8, -0.6, 0.5), (0.3, 1.0, -0.4))
    assert slope >= 0
    assert len(pts) >= 3


def test_report_records_are_json_ready():
    rep = ResidualReport("eq-R")
    assert rep.status == "trivially satisfied" and rep.passed
    rep.add("s0", 1.25e-7)
    rec = rep.to_record()
    assert rec["max_residual"] == format(1.25e-7, ".17g")
    assert float(rec["max_residual"]) == 1.25e-7
    out = reports_json({"eq-R": rep}, {"tool": "finslerflow"})
    assert json.loads(json.dumps(out))["eq-R"]["header"]["tool"] == "finslerflow"


def test_merge_accumulates():
    a = ResidualReport("eq-R")
    a.add("s0", 1e-6)
    b = ResidualReport("eq-R", trivial=1, extra_pass=False)
    b.add("s1", 2e-6)
    a.merge(b)
    assert a.sample_ids == ["s0", "s1"] and a.trivial == 1
    assert a.max_residual == 2e-6 and not a.passed
