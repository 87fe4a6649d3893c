"""Charts, (alpha, beta)-metric specifications, tangent samples and fixtures."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc, norm

from . import jets
from .errors import ConfigError, EmptyFiber, InadmissibleSample, NonPositiveValue, SingularEvaluation
from .jets import Jet


# -- polynomials ----------------------------------------------------------

@dataclass(frozen=True)
class Polynomial:
    """Sparse multivariate polynomial: ``terms = ((coef, (e_1, ..., e_n)), ...)``."""

    terms: tuple

    MAX_DEGREE = 4

    def __post_init__(self):
        for c, e in self.terms:
            if sum(e) > self.MAX_DEGREE or min(e, default=0) < 0:
                raise ConfigError(f"polynomial term {c}*x^{list(e)} exceeds total degree {self.MAX_DEGREE}")

    @classmethod
    def from_config(cls, raw, n):
        terms = []
        for item in raw:
            c, e = item
            e = tuple(int(v) for v in e)
            if len(e) != n:
                raise ConfigError(f"exponent {list(e)} has length {len(e)}, expected {n}")
            terms.append((float(c), e))
        return cls(tuple(terms))

    def __call__(self, x):
        total = 0.0
        for c, e in self.terms:
            term = c
            for xi, k in zip(x, e):
                if k:
                    term = term * xi ** k
            total = total + term
        return total


# -- component fields -----------------------------------------------------

def _as_list(X):
    return [X[i] for i in range(len(X))]


@dataclass(frozen=True)
class RiemannianField:
    """Field ``a_ij(x)``; ``kind`` is one of euclidean, conformal, stereographic-sphere, custom-polynomial."""

    kind: str = "euclidean"
    n: int = 3
    radius: float = 1.0
    conformal: Polynomial | None = None
    entries: tuple | None = None  # upper triangle polynomials, row-major
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("euclidean", "conformal", "stereographic-sphere", "custom-polynomial"):
            raise ConfigError(f"RiemannianField: unknown kind {self.kind!r}")
        if self.kind == "conformal" and self.conformal is None:
            raise ConfigError("RiemannianField: conformal kind needs a factor polynomial")
        if self.kind == "custom-polynomial" and (self.entries is None or len(self.entries) != self.n * (self.n + 1) // 2):
            raise ConfigError("RiemannianField: custom-polynomial needs n(n+1)/2 upper-triangle entries")
        if self.kind == "stereographic-sphere" and not self.radius > 0:
            raise ConfigError("RiemannianField: sphere radius must be positive")

    @property
    def descriptor(self):
        if self.kind == "stereographic-sphere":
            return f"stereographic-sphere({self.radius})"
        return self.kind

    def scaled(self, c):
        return replace(self, scale=self.scale * c)

    def conformal_factor(self, X):
        """Scalar factor when a_ij = factor * delta_ij, else None."""
        x = _as_list(X)
        if self.kind == "euclidean":
            return self.scale
        if self.kind == "conformal":
            return self.conformal(x) * self.scale
        if self.kind == "stereographic-sphere":
            r2 = self.radius ** 2
            q = r2
            for xi in x:
                q = q + xi * xi
            return (4.0 * r2 * r2 * self.scale) * (1.0 / q) ** 2
        return None

    def __call__(self, X):
        lam = self.conformal_factor(X)
        eye = np.eye(self.n)
        if lam is not None:
            if isinstance(lam, Jet):
                return lam * eye
            return lam * eye
        x = _as_list(X)
        rows = [[None] * self.n for _ in range(self.n)]
        k = 0
        for i in range(self.n):
            for j in range(i, self.n):
                v = self.entries[k](x) * self.scale
                rows[i][j] = rows[j][i] = v
                k += 1
        if any(isinstance(v, Jet) for row in rows for v in row):
            return Jet.stack([Jet.stack(row, X.basis) for row in rows], X.basis)
        return np.array(rows, dtype=np.result_type(float, *rows))


@dataclass(frozen=True)
class OneFormField:
    """Field ``b_i(x)``; ``kind`` is one of zero, constant, linear, custom-polynomial."""

    kind: str = "zero"
    n: int = 3
    constant: tuple = ()
    epsilon: float = 0.0
    components: tuple | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "linear", "custom-polynomial"):
            raise ConfigError(f"OneFormField: unknown kind {self.kind!r}")
        if self.kind == "constant" and len(self.constant) != self.n:
            raise ConfigError(f"OneFormField: constant b needs {self.n} components")
        if self.kind == "custom-polynomial" and (self.components is None or len(self.components) != self.n):
            raise ConfigError(f"OneFormField: custom-polynomial needs {self.n} component polynomials")

    @property
    def descriptor(self):
        if self.kind == "constant":
            return f"constant({list(self.constant)})"
        if self.kind == "linear":
            return f"linear({self.epsilon})"
        return self.kind

    def scaled(self, c):
        return replace(self, scale=self.scale * c)

    @property
    def is_zero(self):
        return self.kind == "zero" or self.scale == 0.0

    def __call__(self, X):
        if self.kind == "zero":
            return np.zeros(self.n)
        if self.kind == "constant":
            return np.array(self.constant, dtype=float) * self.scale
        if self.kind == "linear":
            return X * (self.epsilon * self.scale)
        x = _as_list(X)
        vals = [p(x) * self.scale for p in self.components]
        if any(isinstance(v, Jet) for v in vals):
            return Jet.stack(vals, X.basis)
        return np.array(vals, dtype=np.result_type(float, *vals))


_DEFAULT_B0 = {"riemannian": math.inf, "randers": 1.0, "kropina": 1.0, "matsumoto": 0.5}


@dataclass(frozen=True)
class PhiProfile:
    """Profile phi(s); ``coefficients`` (ascending powers) only for kind polynomial."""

    kind: str = "riemannian"
    b0: float | None = None
    s_range: tuple | None = None
    coefficients: tuple = ()

    def __post_init__(self):
        if self.kind not in ("riemannian", "randers", "kropina", "matsumoto", "polynomial"):
            raise ConfigError(f"PhiProfile: unknown kind {self.kind!r}")
        if self.kind == "polynomial" and not self.coefficients:
            raise ConfigError("PhiProfile: polynomial kind needs coefficients")
        if self.b0 is None:
            if self.kind == "polynomial":
                raise ConfigError("PhiProfile: polynomial kind needs an explicit b0")
            object.__setattr__(self, "b0", _DEFAULT_B0[self.kind])
        if not self.b0 > 0:
            raise ConfigError("PhiProfile: b0 must be positive")
        if self.s_range is None:
            if self.kind == "kropina":
                rng = (0.2, 0.99 * min(self.b0, 0.5) if math.isfinite(self.b0) else 0.49)
            elif math.isfinite(self.b0):
                rng = (-0.999 * self.b0, 0.999 * self.b0)
            else:
                rng = (-math.inf, math.inf)
            object.__setattr__(self, "s_range", rng)
        lo, hi = self.s_range
        if not (lo < hi and lo >= -self.b0 and hi <= self.b0):
            raise ConfigError(f"PhiProfile: s_range {self.s_range} must be an interval inside (-b0, b0)")

    def __call__(self, s):
        if self.kind == "riemannian":
            return 1.0 + 0.0 * s
        if self.kind == "randers":
            return 1.0 + s
        if self.kind == "kropina":
            return 1.0 / s
        if self.kind == "matsumoto":
            return 1.0 / (1.0 - s)
        total = 0.0
        for k, c in enumerate(self.coefficients):
            total = total + c * s ** k
        return total

    def derivatives(self, s):
        """(phi, phi', phi'') at a float s."""
        if self.kind == "riemannian":
            return 1.0, 0.0, 0.0
        if self.kind == "randers":
            return 1.0 + s, 1.0, 0.0
        if self.kind == "kropina":
            return 1.0 / s, -1.0 / s ** 2, 2.0 / s ** 3
        if self.kind == "matsumoto":
            u = 1.0 - s
            return 1.0 / u, 1.0 / u ** 2, 2.0 / u ** 3
        c = np.array(self.coefficients, dtype=float)
        p = np.polynomial.Polynomial(c)
        return float(p(s)), float(p.deriv(1)(s)), float(p.deriv(2)(s))

    def positivity_functional(self, s, bsq):
        f, f1, f2 = self.derivatives(s)
        return f - s * f1 + (bsq - s * s) * f2


@dataclass(frozen=True)
class ChartSpec:
    dim: int
    box: tuple
    grid: tuple

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError("ChartSpec: dim must be >= 2")
        if len(self.box) != self.dim or len(self.grid) != self.dim:
            raise ConfigError("ChartSpec: box and grid need one entry per coordinate")
        for lo, hi in self.box:
            if not hi > lo:
                raise ConfigError(f"ChartSpec: degenerate box interval [{lo}, {hi}]")
        if min(self.grid) < 1:
            raise ConfigError("ChartSpec: grid counts must be >= 1")

    def base_points(self):
        axes = []
        for (lo, hi), m in zip(self.box, self.grid):
            axes.append([0.5 * (lo + hi)] if m == 1 else list(np.linspace(lo, hi, m)))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def contains(self, x):
        return all(lo <= xi <= hi for xi, (lo, hi) in zip(x, self.box))


@dataclass(frozen=True)
class TangentSample:
    x: tuple
    y: tuple
    s: float
    admissible: bool
    sid: str = ""

    @property
    def xa(self):
        return np.array(self.x, dtype=float)

    @property
    def ya(self):
        return np.array(self.y, dtype=float)


@dataclass(frozen=True)
class FinslerMetricSpec:
    """F = alpha * phi(beta / alpha) on a single chart."""

    chart: ChartSpec
    alpha: RiemannianField
    beta: OneFormField
    phi: PhiProfile
    name: str = "custom"

    @property
    def n(self):
        return self.chart.dim

    def validate(self):
        """Check the joint invariants on the grid; raises ConfigError."""
        n = self.n
        if self.alpha.n != n or self.beta.n != n:
            raise ConfigError("FinslerMetricSpec: field dimensions disagree with chart dim")
        if self.phi.kind == "riemannian" and not self.beta.is_zero:
            # a 1-form is harmless for phi=1 but almost certainly a config slip
            raise ConfigError("FinslerMetricSpec: riemannian profile with non-zero 1-form")
        for x in self.chart.base_points():
            a = self.alpha(x)
            if not np.allclose(a, a.T, atol=1e-14):
                raise ConfigError(f"RiemannianField: a_ij not symmetric at x={np.round(x, 6).tolist()}")
            if np.linalg.eigvalsh(a).min() <= 0:
                raise ConfigError(f"RiemannianField: a_ij not positive definite at x={np.round(x, 6).tolist()}")
            if self.phi.kind != "riemannian":
                bn = self.b_norm(x)
                if not bn < self.phi.b0:
                    raise ConfigError(
                        f"OneFormField: |b|_alpha = {bn:.6g} must be < b0 = {self.phi.b0:.6g} at x={np.round(x, 6).tolist()}"
                    )
        return self

    def b_norm(self, x):
        a = self.alpha(np.asarray(x, dtype=float))
        b = self.beta(np.asarray(x, dtype=float))
        return float(np.sqrt(b @ np.linalg.solve(a, b)))

    def with_fields(self, alpha=None, beta=None, name=None):
        return replace(self, alpha=alpha or self.alpha, beta=beta or self.beta, name=name or self.name)

    # -- evaluation (works on floats and jets) ---------------------------
    def alpha_beta(self, X, Y):
        A = self.alpha(X)
        alpha2 = jets.einsum("i,i->", Y, jets.einsum("ij,j->i", A, Y))
        if self.beta.is_zero:
            return alpha2, None
        beta = jets.einsum("i,i->", self.beta(X), Y)
        return alpha2, beta

    def F2(self, X, Y):
        alpha2, beta = self.alpha_beta(X, Y)
        kind = self.phi.kind
        # phi = 1 (or beta = 0) keeps F^2 polynomial in y: no sqrt round-off
        if kind == "riemannian":
            return alpha2
        if beta is None:
            if kind == "kropina":
                raise SingularEvaluation("Kropina metric with zero 1-form")
            return alpha2 * self.phi(0.0) ** 2
        if kind == "kropina":
            F = alpha2 / beta
        elif kind == "randers":
            F = jets.sqrt(alpha2) + beta
        elif kind == "matsumoto":
            alpha = jets.sqrt(alpha2)
            F = alpha2 / (alpha - beta)
        else:
            alpha = jets.sqrt(alpha2)
            F = alpha * self.phi(beta / alpha)
        return F * F

    def F(self, x, y):
        """Plain float F(x, y) without admissibility checks."""
        return math.sqrt(float(self.F2(np.asarray(x, float), np.asarray(y, float))))

    def s_value(self, x, y):
        alpha2, beta = self.alpha_beta(np.asarray(x, float), np.asarray(y, float))
        alpha = math.sqrt(float(alpha2)) if alpha2 > 0 else 0.0
        if alpha == 0.0:
            return 0.0, 0.0
        return (0.0 if beta is None else float(beta) / alpha), alpha

    def in_domain(self, x, y):
        """Smoothness domain used by finite-difference stencils (not the sampling window)."""
        s, alpha = self.s_value(x, y)
        if alpha <= 0:
            return False
        if not (-self.phi.b0 < s < self.phi.b0):
            return False
        if self.phi.kind == "kropina" and s <= 0:
            return False
        return self.phi(s) > 0

    def make_sample(self, x, y, sid=""):
        s, alpha = self.s_value(x, y)
        lo, hi = self.phi.s_range
        ok = alpha > 0 and lo <= s <= hi and float(np.linalg.norm(y)) > 0
        return TangentSample(tuple(float(v) for v in x), tuple(float(v) for v in y), s, bool(ok), sid)


# -- operations -----------------------------------------------------------

def evaluate_F(spec, sample):
    s, alpha = spec.s_value(sample.x, sample.y)
    lo, hi = spec.phi.s_range
    if alpha <= 0 or not np.any(sample.ya):
        raise InadmissibleSample(f"alpha = 0 at sample {sample.sid or sample.y}")
    if not lo <= s <= hi:
        raise InadmissibleSample(f"s = {s:.6g} outside s_range {spec.phi.s_range}")
    phi = spec.phi(s)
    if not phi > 0:
        raise NonPositiveValue(f"phi({s:.6g}) = {phi:.6g} <= 0")
    return alpha * phi


@dataclass(frozen=True)
class AdmissibilityVerdict:
    s_in_range: bool
    alpha_positive: bool
    g_positive_definite: bool
    positivity_functional: bool
    s: float
    min_eigenvalue: float

    @property
    def admissible(self):
        return self.s_in_range and self.alpha_positive and self.g_positive_definite

    def as_dict(self):
        return {
            "s_in_range": self.s_in_range,
            "alpha_positive": self.alpha_positive,
            "g_positive_definite": self.g_positive_definite,
            "positivity_functional": self.positivity_functional,
            "s": self.s,
            "min_eigenvalue": self.min_eigenvalue,
        }


def fundamental_tensor(spec, x, y):
    """g_ij = 1/2 [F^2]_{y^i y^j} from a degree-2 vertical jet."""
    n = spec.n
    b = jets.basis((n, 2))
    Y = Jet.variables(y, b, 0)
    F2 = spec.F2(np.asarray(x, float), Y)
    g = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            e = [0] * n
            e[i] += 1
            e[j] += 1
            g[i, j] = 0.5 * F2.derivative(e)
    return g


def admissibility_check(spec, sample):
    s, alpha = spec.s_value(sample.x, sample.y)
    lo, hi = spec.phi.s_range
    s_ok = lo <= s <= hi
    a_ok = alpha > 0
    g_ok = False
    lam = float("nan")
    pos_ok = False
    if s_ok and a_ok:
        bsq = spec.b_norm(sample.x) ** 2 if not spec.beta.is_zero else 0.0
        pos_ok = spec.phi.positivity_functional(s, bsq) > 0
        try:
            lam = float(np.linalg.eigvalsh(fundamental_tensor(spec, sample.x, sample.y)).min())
            g_ok = lam > 0
        except SingularEvaluation:
            g_ok = False
    return AdmissibilityVerdict(bool(s_ok), bool(a_ok), bool(g_ok), bool(pos_ok), float(s), lam)


def unit_directions(n, count, seed=0, symmetric=False):
    """Deterministic low-discrepancy unit vectors (scrambled Halton through the normal quantile)."""
    half = count // 2 if symmetric else count
    pts = qmc.Halton(d=n, scramble=True, seed=seed).random(half)
    pts = np.clip(pts, 1e-12, 1 - 1e-12)
    v = norm.ppf(pts)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    if symmetric:
        v = np.concatenate([v, -v])
    return v


def sample_lattice(spec, ydirs_per_point, seed=0, symmetric=False):
    n = spec.n
    if ydirs_per_point < n + 1:
        raise ValueError(f"ydirs_per_point must be >= n+1 = {n + 1}")
    dirs = unit_directions(n, ydirs_per_point, seed, symmetric)
    out = []
    for p, x in enumerate(spec.chart.base_points()):
        kept = []
        for d, y in enumerate(dirs):
            smp = spec.make_sample(x, y, sid=f"p{p}d{d}")
            if smp.admissible and admissibility_check(spec, smp).admissible:
                kept.append(smp)
        if not kept:
            raise EmptyFiber(f"no admissible direction at base point {list(x)}")
        out.extend(kept)
    return out


def random_samples(spec, count, seed=0, max_tries=100):
    """``count`` admissible samples with x uniform in the box and random directions."""
    rng = np.random.default_rng(seed)
    lo = np.array([a for a, _ in spec.chart.box])
    hi = np.array([b for _, b in spec.chart.box])
    out = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > max_tries * count:
            raise EmptyFiber("could not draw enough admissible samples")
        x = lo + (hi - lo) * rng.random(spec.n)
        y = rng.normal(size=spec.n)
        y *= rng.uniform(0.5, 2.0) / np.linalg.norm(y)
        smp = spec.make_sample(x, y, sid=f"r{len(out)}")
        if smp.admissible and admissibility_check(spec, smp).admissible:
            out.append(smp)
    return out


# -- fixtures -------------------------------------------------------------

FIXTURES = ("FIX-EUC", "FIX-MINK-RANDERS", "FIX-RANDERS-VAR", "FIX-SPHERE", "FIX-KROPINA")


def fixture(name, n=3, r=1.0, grid=None):
    name = name.upper()
    grid = tuple(grid) if grid is not None else (2,) * n
    unit_box = ((-1.0, 1.0),) * n
    if name == "FIX-EUC":
        spec = FinslerMetricSpec(ChartSpec(n, unit_box, grid), RiemannianField("euclidean", n),
                                 OneFormField("zero", n), PhiProfile("riemannian"), name)
    elif name == "FIX-MINK-RANDERS":
        b = (0.3,) + (0.0,) * (n - 1)
        spec = FinslerMetricSpec(ChartSpec(n, unit_box, grid), RiemannianField("euclidean", n),
                                 OneFormField("constant", n, constant=b), PhiProfile("randers"), name)
    elif name == "FIX-RANDERS-VAR":
        spec = FinslerMetricSpec(ChartSpec(n, unit_box, grid), RiemannianField("euclidean", n),
                                 OneFormField("linear", n, epsilon=0.1), PhiProfile("randers"), name)
    elif name == "FIX-SPHERE":
        spec = FinslerMetricSpec(ChartSpec(n, ((-0.8, 0.8),) * n, grid),
                                 RiemannianField("stereographic-sphere", n, radius=float(r)),
                                 OneFormField("zero", n), PhiProfile("riemannian"), name)
    elif name == "FIX-KROPINA":
        b = (0.5,) + (0.0,) * (n - 1)
        spec = FinslerMetricSpec(ChartSpec(n, unit_box, grid), RiemannianField("euclidean", n),
                                 OneFormField("constant", n, constant=b),
                                 PhiProfile("kropina", b0=1.0, s_range=(0.2, 0.49)), name)
    else:
        raise ConfigError(f"unknown fixture {name!r}; known: {', '.join(FIXTURES)}")
    return spec.validate()
