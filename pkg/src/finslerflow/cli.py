"""Command line front end: ``finslerflow tensors|curvature|audit|flow --config run.toml``.

Exit codes: 0 ok, 2 config error, 3 invariant violation or failed audit case,
4 numerical failure, 5 flow integration aborted (trace still written).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from . import audit as aud
from .config import load
from .curvature import CONVENTION, curvature_bundle, einstein_diagnostic, map_samples, normalized_ricci
from .errors import ConfigError, FinslerError, RiemannianDegenerate
from .flow import SMQuadratureSpec, run_flow, sm_average
from .metric import random_samples, sample_lattice
from .tensors import compute_bundle, g_norm3, semi_c_fit

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_NUMERICAL, EXIT_ABORTED = 0, 2, 3, 4, 5
GATE_TOL = 1e-9
EULER_TOL = 1e-6
FIXED_POINT_TOL = 1e-8


def fmt(v):
    """17 significant digits, '.' decimal, no grouping."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def header(cfg, command):
    return {
        "tool": "finslerflow",
        "version": __version__,
        "command": command,
        "convention": CONVENTION,
        "ladder": aud.LADDER,
        "seed": cfg.seed,
        "metric": cfg.spec.name,
        "config": cfg.raw,
    }


class Writer:
    """Single writer for every report of a run."""

    def __init__(self, cfg):
        self.dir = cfg.out_dir
        self.formats = cfg.formats
        os.makedirs(self.dir, exist_ok=True)
        self.written = []

    def json(self, name, obj):
        if "json" not in self.formats:
            return
        path = os.path.join(self.dir, name)
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=1, sort_keys=False, default=_default)
            fh.write("\n")
        self.written.append(path)

    def csv(self, name, head, rows):
        if "csv" not in self.formats:
            return
        path = os.path.join(self.dir, name)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(head)
            for r in rows:
                w.writerow([fmt(v) for v in r])
        self.written.append(path)


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serializable: {type(o)}")


def samples_for(cfg):
    s = cfg.sampling
    if s.random:
        return random_samples(cfg.spec, s.random, s.seed)
    return sample_lattice(cfg.spec, s.directions, s.seed, s.symmetric)


def _rel(v, scale):
    return float(np.max(np.abs(v))) / (scale + 1e-300) if scale > 0 else float(np.max(np.abs(v)))


def tensor_gates(tb):
    """Relative residuals of the algebraic invariants of one TensorBundle."""
    n = tb.n
    cscale = float(np.max(np.abs(tb.C))) * float(np.max(np.abs(tb.y)))
    iscale = float(np.max(np.abs(tb.I))) * float(np.max(np.abs(tb.y)))
    return {
        "C_y": _rel(np.einsum("ijk,k->ij", tb.C, tb.y), cscale),
        "I_y": _rel(tb.I @ tb.y, iscale),
        "h_y": _rel(tb.h @ tb.y, float(np.max(np.abs(tb.g))) * float(np.max(np.abs(tb.y)))),
        "hI_I": _rel(tb.h @ tb.g_inv @ tb.I - tb.I, float(np.max(np.abs(tb.I)))),
        "g_ginv": float(np.max(np.abs(tb.g @ tb.g_inv - np.eye(n)))),
    }


def run_tensors(cfg, w):
    spec = cfg.spec
    samples = samples_for(cfg)
    records, rows, violations = {}, [], []
    for smp in samples:
        tb = compute_bundle(spec, smp)
        gates = tensor_gates(tb)
        bad = [k for k, v in gates.items() if v > GATE_TOL]
        if bad:
            violations.append(f"{smp.sid}: {','.join(bad)}")
        fit = None
        if spec.n >= 3:
            try:
                f = semi_c_fit(tb, spec.n)
                fit = {"p": f.p, "q": f.q, "decomposition_residual": f.decomposition_residual, "kappa": f.kappa,
                       "coefficient": f.coefficient}
            except RiemannianDegenerate as exc:
                fit = {"skipped": str(exc)}
        records[smp.sid] = {"x": smp.x, "y": smp.y, "tensors": tb.to_record(), "gates": gates, "semi_c_fit": fit}
        C_norm = g_norm3(tb.C, tb.g_inv)
        q = fit.get("q", "") if fit else ""
        res = fit.get("decomposition_residual", "") if fit else ""
        rows.append([smp.sid, *smp.x, *smp.y, tb.F, C_norm, tb.I_normsq, q, res, max(gates.values())])
    n = spec.n
    w.json("tensors.json", {"header": header(cfg, "tensors"), "gate_tolerance": GATE_TOL,
                            "violations": violations, "samples": records})
    w.csv("tensors.csv", ["sample", *[f"x{i}" for i in range(n)], *[f"y{i}" for i in range(n)], "F", "C_norm",
                          "I_normsq", "q", "fit_residual", "max_gate"], rows)
    return EXIT_INVARIANT if violations else EXIT_OK, f"{len(samples)} samples, {len(violations)} gate violations"


def run_curvature(cfg, w):
    spec = cfg.spec
    samples = samples_for(cfg)
    cbs = map_samples(lambda s: curvature_bundle(spec, s), samples)
    records, rows, violations = {}, [], []
    for smp, cb in zip(samples, cbs):
        euler = abs(float(cb.tensors.y @ cb.Ric_ij @ cb.tensors.y) - cb.F2 * cb.Rnorm) / (abs(cb.F2 * cb.Rnorm) + 1e-12)
        sym = float(np.max(np.abs(cb.Ric_ij - cb.Ric_ij.T)))
        if euler > EULER_TOL or sym > 0:
            violations.append(f"{smp.sid}: euler={euler:.3g} sym={sym:.3g}")
        records[smp.sid] = {"x": smp.x, "y": smp.y, **cb.to_record(), "euler_residual": euler}
        rows.append([smp.sid, *smp.x, *smp.y, cb.Ric, cb.Rnorm, cb.rho, euler])
    diag = None
    if not cfg.sampling.random:
        d = einstein_diagnostic(spec, samples)
        diag = {"einstein": d.einstein, "max_rel_deviation": d.max_rel_deviation, "tolerance": d.tolerance}
        w.csv("einstein.csv", ["x", "mean_R", "deviation"],
              [[";".join(fmt(v) for v in x), m, dv] for x, m, dv in d.csv_rows()])
    n = spec.n
    w.json("curvature.json", {"header": header(cfg, "curvature"), "violations": violations,
                              "einstein_diagnostic": diag, "samples": records})
    w.csv("curvature.csv", ["sample", *[f"x{i}" for i in range(n)], *[f"y{i}" for i in range(n)], "Ric", "R", "rho",
                            "euler_residual"], rows)
    msg = f"{len(samples)} samples"
    if diag:
        msg += f", einstein={diag['einstein']} (deviation {diag['max_rel_deviation']:.3g})"
    return EXIT_INVARIANT if violations else EXIT_OK, msg


def resolve_cases(cfg):
    cases = cfg.audit.cases or aud.ALL_IDS
    unknown = [c for c in cases if c not in aud.CASES]
    if unknown:
        raise ConfigError(f"audit.cases: unknown case id(s) {unknown}")
    semi = [c for c in cases if aud.CASES[c].requires_semi_c]
    if cfg.spec.n < 3 and semi:
        raise ConfigError(f"audit: semi-C cases {semi} need dimension n >= 3 (got n = {cfg.spec.n})")
    return tuple(cases)


def audit_mean_R(cfg, cases):
    if not any(c in aud.SEC5_IDS for c in cases):
        return 0.0
    if cfg.audit.mean_R != "auto":
        return float(cfg.audit.mean_R)
    quad = SMQuadratureSpec(cfg.audit.directions_per_fiber, cfg.audit.weight, seed=cfg.sampling.seed)
    return sm_average(cfg.spec, normalized_ricci, quad)


def run_audit_cmd(cfg, w):
    cases = resolve_cases(cfg)
    mean_R = audit_mean_R(cfg, cases)
    samples = samples_for(cfg)
    reports = aud.run_audit(cfg.spec, samples, cases, mean_R, cfg.audit.dt_probe, cfg.fd)
    head = header(cfg, "audit")
    head["mean_R"] = mean_R
    for case, body in aud.reports_json(reports, head).items():
        w.json(f"audit_{case}.json", body)
    w.csv("audit_summary.csv", ["case", "max_residual", "rung", "pass"],
          [[r.case, r.max_residual, r.spec.rung, r.status] for r in reports.values()])
    failed = [c for c, r in reports.items() if not r.passed]
    lines = [f"{r.case:18s} {r.spec.rung:7s} {r.max_residual:10.3e} {r.status}" for r in reports.values()]
    return (EXIT_INVARIANT if failed else EXIT_OK), "\n".join(lines)


def run_flow_cmd(cfg, w):
    if cfg.family is None or cfg.flow is None:
        raise ConfigError("flow: a [flow] table is required for the flow command")
    trace = run_flow(cfg.family, cfg.flow)
    w.csv("flow_trace.csv", trace.header(), [[t, *th, res, m, lo, hi] for t, th, res, m, lo, hi in trace.rows])
    thetas = trace.thetas
    drift = float(np.max(np.abs(thetas - thetas[0]))) if len(thetas) else 0.0
    summary = {
        "header": header(cfg, "flow"),
        "status": trace.status,
        "message": trace.message,
        "steps_taken": len(trace.rows) - 1,
        "final_t": trace.rows[-1][0],
        "final_theta": list(trace.rows[-1][1]),
        "extinction_estimate": trace.extinction_estimate,
        "fixed_point": drift <= FIXED_POINT_TOL,
        "max_theta_drift": drift,
        "max_projection_residual": max(r[2] for r in trace.rows),
    }
    w.json("flow_summary.json", summary)
    code = EXIT_ABORTED if trace.status in ("extinct", "bounds") else EXIT_OK
    msg = f"status={trace.status} fixed_point={summary['fixed_point']}"
    if trace.extinction_estimate is not None:
        msg += f" extinction_estimate={trace.extinction_estimate:.6f}"
    return code, msg


COMMANDS = {"tensors": run_tensors, "curvature": run_curvature, "audit": run_audit_cmd, "flow": run_flow_cmd}


def parse_args(argv):
    p = argparse.ArgumentParser(prog="finslerflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"finslerflow {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int, default=None, help="seed for direction sets (overrides the config)")
    p.add_argument("--format", default=None, help="comma separated subset of json,csv")
    return p.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    formats = tuple(f.strip() for f in args.format.split(",") if f.strip()) if args.format else None
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be a non-negative integer")
        cfg = load(args.config, seed=args.seed, out_dir=args.out, formats=formats)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        w = Writer(cfg)
        code, msg = COMMANDS[args.command](cfg, w)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FinslerError as exc:
        sample = getattr(exc, "sample", None)
        where = f" (sample {sample.sid})" if sample is not None else ""
        print(f"numerical failure: {type(exc).__name__}: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(msg)
    for path in w.written:
        print(f"wrote {path}")
    return code


if __name__ == "__main__":
    sys.exit(main())
