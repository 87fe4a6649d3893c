"""TOML run configuration: schema, validation and construction of the in-process objects."""
from __future__ import annotations

from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .flow import FlowConfig, ParametricFamily, SMQuadratureSpec
from .jets import FDConfig
from .metric import (
    FIXTURES,
    ChartSpec,
    FinslerMetricSpec,
    OneFormField,
    PhiProfile,
    Polynomial,
    RiemannianField,
    fixture,
)

# allowed keys per table; a nested dict value means a sub-table
SCHEMA = {
    "metric": {
        "fixture": None, "n": None, "r": None, "grid": None, "name": None,
        "chart": {"dim": None, "box": None, "grid": None},
        "alpha": {"kind": None, "radius": None, "conformal": None, "entries": None},
        "beta": {"kind": None, "constant": None, "epsilon": None, "components": None},
        "phi": {"kind": None, "b0": None, "s_range": None, "coefficients": None},
    },
    "sampling": {"directions": None, "random": None, "symmetric": None, "seed": None},
    "fd": {"base_step": None, "richardson_levels": None, "order_scale": None},
    "audit": {"cases": None, "dt_probe": None, "mean_R": None, "weight": None, "directions_per_fiber": None},
    "flow": {
        "family": None, "theta0": None, "bounds": None, "mode": None, "dt": None, "steps": None,
        "integrator": None, "stop_at_extinction": None,
        "quadrature": {"directions_per_fiber": None, "weight": None, "grid": None, "seed": None},
    },
    "output": {"dir": None, "formats": None},
    "seed": None,
}

FORMATS = ("json", "csv")


def check_keys(raw, schema=SCHEMA, where=""):
    """Reject unknown keys, naming their dotted location."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a table")
    for key, value in raw.items():
        loc = f"{where}.{key}" if where else key
        if key not in schema:
            raise ConfigError(f"unknown key '{loc}'")
        sub = schema[key]
        if isinstance(sub, dict):
            check_keys(value, sub, loc)


@dataclass
class SamplingConfig:
    directions: int = 12
    random: int = 0
    symmetric: bool = False
    seed: int = 0


@dataclass
class AuditConfig:
    cases: tuple | None = None
    dt_probe: float = 1e-4
    mean_R: object = "auto"
    weight: str = "uniform"
    directions_per_fiber: int = 4


@dataclass
class RunConfig:
    spec: FinslerMetricSpec
    sampling: SamplingConfig
    fd: FDConfig
    audit: AuditConfig
    flow: FlowConfig | None
    family: ParametricFamily | None
    out_dir: str = "out"
    formats: tuple = FORMATS
    seed: int = 0
    raw: dict = field(default_factory=dict)


def _get(table, key, kind, default, where):
    if key not in table:
        return default
    v = table[key]
    try:
        if kind is float and isinstance(v, bool):
            raise TypeError
        if kind is int and (isinstance(v, bool) or (isinstance(v, float) and not v.is_integer())):
            raise TypeError
        return kind(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {v!r}") from None


def _polys(raw, n, where):
    try:
        return Polynomial.from_config(raw, n)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: polynomial terms must be [coef, [exponents...]] ({exc})") from None


def build_spec(m):
    if "fixture" in m:
        name = str(m["fixture"]).upper()
        if name not in FIXTURES:
            raise ConfigError(f"metric.fixture: unknown fixture {name!r}; choose from {', '.join(FIXTURES)}")
        extra = set(m) - {"fixture", "n", "r", "grid", "name"}
        if extra:
            raise ConfigError(f"metric: keys {sorted(extra)} cannot be combined with a fixture reference")
        n = _get(m, "n", int, 3, "metric")
        if n < 2:
            raise ConfigError("metric.n: ChartSpec needs dim >= 2")
        r = _get(m, "r", float, 1.0, "metric")
        grid = m.get("grid")
        if grid is not None and len(grid) != n:
            raise ConfigError(f"metric.grid: needs {n} entries")
        return fixture(name, n, r, grid).validate()
    for sect in ("chart", "alpha", "beta", "phi"):
        if sect not in m:
            raise ConfigError(f"metric.{sect}: required when no fixture is given")
    c = m["chart"]
    n = _get(c, "dim", int, None, "metric.chart")
    if n is None:
        raise ConfigError("metric.chart.dim: required")
    chart = ChartSpec(n, tuple(tuple(float(v) for v in b) for b in c.get("box", [[-1.0, 1.0]] * n)),
                      tuple(int(v) for v in c.get("grid", [2] * n)))
    a = m["alpha"]
    akind = a.get("kind", "euclidean")
    alpha = RiemannianField(
        akind, n,
        radius=_get(a, "radius", float, 1.0, "metric.alpha"),
        conformal=_polys(a["conformal"], n, "metric.alpha.conformal") if "conformal" in a else None,
        entries=tuple(_polys(e, n, "metric.alpha.entries") for e in a["entries"]) if "entries" in a else None,
    )
    b = m["beta"]
    beta = OneFormField(
        b.get("kind", "zero"), n,
        constant=tuple(float(v) for v in b.get("constant", ())),
        epsilon=_get(b, "epsilon", float, 0.0, "metric.beta"),
        components=tuple(_polys(e, n, "metric.beta.components") for e in b["components"]) if "components" in b else None,
    )
    p = m["phi"]
    phi = PhiProfile(
        p.get("kind", "riemannian"),
        b0=_get(p, "b0", float, None, "metric.phi"),
        s_range=tuple(float(v) for v in p["s_range"]) if "s_range" in p else None,
        coefficients=tuple(float(v) for v in p.get("coefficients", ())),
    )
    return FinslerMetricSpec(chart, alpha, beta, phi, str(m.get("name", "custom"))).validate()


def build_family(spec, f):
    kind = f.get("family", "conformal")
    theta0 = f.get("theta0")
    if kind == "conformal":
        fam = ParametricFamily.conformal(spec, float(theta0) if theta0 is not None else 1.0)
    elif kind == "log-conformal":
        fam = ParametricFamily.log_conformal(spec, float(theta0) if theta0 is not None else 1.0)
    elif kind == "randers-scale":
        if spec.phi.kind != "randers":
            raise ConfigError("flow.family: randers-scale needs a randers metric")
        bounds = tuple(float(v) for v in f.get("bounds", (0.0, 2.0)))
        fam = ParametricFamily.randers_scale(spec, float(theta0) if theta0 is not None else 1.0, bounds)
    else:
        raise ConfigError(f"flow.family: unknown family {kind!r}")
    return fam


def build_flow(f, seed):
    q = f.get("quadrature", {})
    try:
        quad = SMQuadratureSpec(
            _get(q, "directions_per_fiber", int, 4, "flow.quadrature"),
            q.get("weight", "uniform"),
            tuple(int(v) for v in q["grid"]) if "grid" in q else None,
            _get(q, "seed", int, seed, "flow.quadrature"),
        )
        return FlowConfig(
            f.get("mode", "unnormalized"),
            _get(f, "dt", float, 1e-3, "flow"),
            _get(f, "steps", int, 100, "flow"),
            f.get("integrator", "rk4"),
            quad,
            bool(f.get("stop_at_extinction", True)),
        )
    except ValueError as exc:
        raise ConfigError(f"flow: {exc}") from None


def build(raw, seed=None, out_dir=None, formats=None):
    """RunConfig from a parsed TOML mapping; CLI overrides win over file values."""
    check_keys(raw)
    if "metric" not in raw:
        raise ConfigError("metric: table is required")
    spec = build_spec(raw["metric"])
    s = raw.get("sampling", {})
    file_seed = _get(raw, "seed", int, 0, "config")
    sampling = SamplingConfig(
        _get(s, "directions", int, 12, "sampling"),
        _get(s, "random", int, 0, "sampling"),
        bool(s.get("symmetric", False)),
        int(seed) if seed is not None else _get(s, "seed", int, file_seed, "sampling"),
    )
    seed = file_seed if seed is None else int(seed)
    if sampling.random == 0 and sampling.directions < spec.n + 1:
        raise ConfigError(f"sampling.directions: needs >= n+1 = {spec.n + 1}")
    d = raw.get("fd", {})
    try:
        fd = FDConfig(
            _get(d, "base_step", float, 1e-3, "fd"),
            _get(d, "richardson_levels", int, 2, "fd"),
            tuple(float(v) for v in d.get("order_scale", (1.0, 2.0, 5.0, 20.0, 30.0))),
        )
    except ValueError as exc:
        raise ConfigError(f"fd: {exc}") from None
    a = raw.get("audit", {})
    mean_R = a.get("mean_R", "auto")
    if mean_R != "auto" and not isinstance(mean_R, (int, float)):
        raise ConfigError("audit.mean_R: expected a number or \"auto\"")
    audit = AuditConfig(
        tuple(a["cases"]) if "cases" in a else None,
        _get(a, "dt_probe", float, 1e-4, "audit"),
        mean_R,
        a.get("weight", "uniform"),
        _get(a, "directions_per_fiber", int, 4, "audit"),
    )
    flow = family = None
    if "flow" in raw:
        flow = build_flow(raw["flow"], seed)
        family = build_family(spec, raw["flow"])
    o = raw.get("output", {})
    fmts = formats if formats is not None else tuple(o.get("formats", FORMATS))
    bad = [f for f in fmts if f not in FORMATS]
    if bad:
        raise ConfigError(f"output.formats: unknown format(s) {bad}")
    return RunConfig(spec, sampling, fd, audit, flow, family,
                     out_dir if out_dir is not None else str(o.get("dir", "out")), tuple(fmts), seed, raw)


def load(path, **overrides):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return build(raw, **overrides)


def loads(text, **overrides):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(exc)) from None
    return build(raw, **overrides)
