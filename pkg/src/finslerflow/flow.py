"""Scalar Ricci flow (un-normalized and normalized) on parametric metric families."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .curvature import curvature_bundle, map_samples, normalized_ricci
from .errors import BoundsExceeded, Extinct, NotHomogeneous, RankDeficient
from .metric import fundamental_tensor, sample_lattice

EXTINCTION_GUARD = 0.05


@dataclass(frozen=True)
class ParametricFamily:
    """One- or few-parameter deformation of ``base``.

    kinds: ``conformal`` (theta = c, F = sqrt(c) F_base), ``log-conformal``
    (theta = log c, same metrics) and ``randers-scale`` (theta = tau, b -> tau b).
    """

    base: object
    kind: str = "conformal"
    theta0: tuple = (1.0,)
    bounds: tuple = ((1e-12, 1e12),)

    def __post_init__(self):
        if self.kind not in ("conformal", "log-conformal", "randers-scale"):
            raise ValueError(f"unknown family kind {self.kind!r}")

    @classmethod
    def conformal(cls, base, c0=1.0):
        return cls(base, "conformal", (float(c0),), ((1e-12, 1e12),))

    @classmethod
    def log_conformal(cls, base, c0=1.0):
        return cls(base, "log-conformal", (math.log(c0),), ((-60.0, 60.0),))

    @classmethod
    def randers_scale(cls, base, tau0=1.0, bounds=(0.0, 2.0)):
        return cls(base, "randers-scale", (float(tau0),), (tuple(bounds),))

    @property
    def names(self):
        return {"conformal": ("c",), "log-conformal": ("log_c",), "randers-scale": ("tau",)}[self.kind]

    def scale(self, theta):
        """Conformal factor c, or None for non-conformal families."""
        if self.kind == "conformal":
            return float(theta[0])
        if self.kind == "log-conformal":
            return math.exp(theta[0])
        return None

    def check_bounds(self, theta):
        for v, (lo, hi), name in zip(theta, self.bounds, self.names):
            if not (lo <= v <= hi) or not math.isfinite(v):
                raise BoundsExceeded(f"{name} = {v:.6g} left [{lo:g}, {hi:g}]")

    def spec_at(self, theta):
        base = self.base
        if self.kind in ("conformal", "log-conformal"):
            c = self.scale(theta)
            if not c > 0:
                raise BoundsExceeded(f"conformal factor {c} not positive")
            return base.with_fields(alpha=base.alpha.scaled(c), beta=base.beta.scaled(math.sqrt(c)))
        return base.with_fields(beta=base.beta.scaled(float(theta[0])))

    def dlogF(self, theta, sample):
        """Row of d log F / d theta at one sample."""
        if self.kind == "conformal":
            return np.array([0.5 / theta[0]])
        if self.kind == "log-conformal":
            return np.array([0.5])
        h = 1e-6 * (1.0 + abs(theta[0]))
        up = self.spec_at((theta[0] + h,)).F(sample.x, sample.y)
        dn = self.spec_at((theta[0] - h,)).F(sample.x, sample.y)
        return np.array([(math.log(up) - math.log(dn)) / (2 * h)])


@dataclass(frozen=True)
class SMQuadratureSpec:
    """Fiber-direction lattice with a declared positive weight, normalized to mass 1."""

    directions_per_fiber: int = 4
    weight: str = "uniform"
    grid: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.weight not in ("uniform", "det_g"):
            raise ValueError(f"unknown weight {self.weight!r}")

    def samples(self, spec):
        if self.grid is not None:
            from dataclasses import replace

            spec = replace(spec, chart=replace(spec.chart, grid=tuple(self.grid)))
        return sample_lattice(spec, self.directions_per_fiber, self.seed)

    def weights(self, spec, samples):
        if self.weight == "uniform":
            w = np.ones(len(samples))
        else:
            w = np.array([np.linalg.det(fundamental_tensor(spec, s.x, s.y)) for s in samples])
        if np.any(w <= 0):
            raise ValueError("quadrature weights must be strictly positive")
        return w / math.fsum(w)


def weighted_mean(values, weights):
    values = np.asarray(values, dtype=float)
    return math.fsum(weights * values) / math.fsum(weights)


def sm_average(spec, quantity, quad, samples=None):
    """Normalized SM average of a 0-homogeneous ``quantity(spec, x, y)``."""
    samples = samples or quad.samples(spec)
    s0 = samples[0]
    q1 = quantity(spec, s0.x, s0.y)
    q2 = quantity(spec, s0.x, tuple(2.0 * v for v in s0.y))
    if abs(q1 - q2) > 1e-6 * (1.0 + abs(q1)):
        raise NotHomogeneous(f"quantity not 0-homogeneous: {q1} vs {q2}")
    vals = map_samples(lambda s: quantity(spec, s.x, s.y), samples)
    return weighted_mean(vals, quad.weights(spec, samples))


def scalar_flow_rhs(spec, sample, mode, sm_average_R=None, R=None):
    """d log F / dt at a sample: -R, or -R + <R> when normalized."""
    if R is None:
        R = normalized_ricci(spec, sample.x, sample.y)
    if mode == "unnormalized":
        return -R
    if mode == "normalized":
        if sm_average_R is None:
            raise ValueError("normalized mode needs the SM average of R")
        return -R + sm_average_R
    raise ValueError(f"unknown mode {mode!r}")


def tensor_flow_rhs(spec, sample, mode, sm_average_R=None, cb=None):
    """d g_ij / dt: -2 Ric_ij (+ 2 <R> g_ij when normalized)."""
    cb = cb or curvature_bundle(spec, sample)
    rhs = -2.0 * cb.Ric_ij
    if mode == "normalized":
        if sm_average_R is None:
            raise ValueError("normalized mode needs the SM average of R")
        rhs = rhs + 2.0 * sm_average_R * cb.tensors.g
    elif mode != "unnormalized":
        raise ValueError(f"unknown mode {mode!r}")
    return rhs


def constant_curvature_oracle(n, r0, t):
    """c(t) for F^2 = c(t) F_0^2 on the round sphere of radius r0 under d log F = -R."""
    t_star = r0 ** 2 / (2.0 * (n - 1))
    if t >= t_star:
        raise Extinct(f"t = {t} is past extinction time {t_star}")
    return 1.0 - 2.0 * (n - 1) * t / r0 ** 2


def extinction_time(n, r0):
    return r0 ** 2 / (2.0 * (n - 1))


@dataclass(frozen=True)
class FlowConfig:
    mode: str = "unnormalized"
    dt: float = 1e-3
    steps: int = 100
    integrator: str = "rk4"
    quadrature: SMQuadratureSpec = field(default_factory=SMQuadratureSpec)
    stop_at_extinction: bool = True

    def __post_init__(self):
        if self.mode not in ("unnormalized", "normalized"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.integrator not in ("euler", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if not self.dt > 0 or self.steps < 1:
            raise ValueError("dt must be positive and steps >= 1")


@dataclass
class RhsEval:
    theta_dot: np.ndarray
    residual: float
    mean_R: float
    min_R: float
    max_R: float


def projected_rhs(family, theta, config, samples, weights=None):
    """Weighted least-squares projection of the pointwise rhs onto span{d log F / d theta}."""
    spec = family.spec_at(theta)
    R = np.array(map_samples(lambda s: normalized_ricci(spec, s.x, s.y), samples))
    w = weights if weights is not None else config.quadrature.weights(spec, samples)
    avg = weighted_mean(R, w)
    b = np.array([scalar_flow_rhs(spec, s, config.mode, avg, R=r) for s, r in zip(samples, R)])
    J = np.array([family.dlogF(theta, s) for s in samples])
    sw = np.sqrt(w)[:, None]
    A = J * sw
    sv = np.linalg.svd(A, compute_uv=False)
    if sv.min() <= 1e-12 * max(sv.max(), 1e-300):
        raise RankDeficient("family Jacobian d log F / d theta is rank deficient on the lattice")
    theta_dot, *_ = np.linalg.lstsq(A, b * sw[:, 0], rcond=None)
    resid = b - J @ theta_dot
    rms = math.sqrt(max(weighted_mean(resid ** 2, w), 0.0))
    return RhsEval(theta_dot, rms, avg, float(R.min()), float(R.max()))


def parametric_flow_step(family, theta, config, t, samples=None, weights=None):
    """One integrator step; returns (theta_next, RhsEval at theta)."""
    samples = samples or config.quadrature.samples(family.spec_at(theta))
    theta = np.asarray(theta, dtype=float)
    k1 = projected_rhs(family, theta, config, samples, weights)
    if config.integrator == "euler":
        nxt = theta + config.dt * k1.theta_dot
    else:
        dt = config.dt
        f = lambda th: projected_rhs(family, th, config, samples, weights).theta_dot
        k2 = f(theta + 0.5 * dt * k1.theta_dot)
        k3 = f(theta + 0.5 * dt * k2)
        k4 = f(theta + dt * k3)
        nxt = theta + dt / 6.0 * (k1.theta_dot + 2 * k2 + 2 * k3 + k4)
    family.check_bounds(nxt)
    return nxt, k1


@dataclass
class FlowTrace:
    names: tuple
    rows: list = field(default_factory=list)
    status: str = "running"
    extinction_estimate: float | None = None
    message: str = ""

    def append(self, t, theta, ev):
        self.rows.append((float(t), tuple(float(v) for v in theta), ev.residual, ev.mean_R, ev.min_R, ev.max_R))

    @property
    def times(self):
        return np.array([r[0] for r in self.rows])

    @property
    def thetas(self):
        return np.array([r[1] for r in self.rows])

    def theta_at(self, t):
        ts = self.times
        k = int(np.argmin(np.abs(ts - t)))
        if abs(ts[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"no trace row at t = {t}")
        return self.thetas[k]

    def header(self):
        return ["t", *self.names, "residual", "meanR", "minR", "maxR"]


def run_flow(family, config, t0=0.0):
    """Integrate ``config.steps`` steps from ``family.theta0``; stops early on the extinction guard.

    Bounds violations end the run with status ``"bounds"``; the trace is kept.
    """
    theta = np.array(family.theta0, dtype=float)
    samples = config.quadrature.samples(family.spec_at(theta))
    weights = None
    if config.quadrature.weight == "uniform":
        weights = config.quadrature.weights(None, samples)
    trace = FlowTrace(family.names)
    t = t0
    for step in range(config.steps + 1):
        c = family.scale(theta)
        ev = projected_rhs(family, theta, config, samples, weights)
        trace.append(t, theta, ev)
        if c is not None and config.stop_at_extinction and c < EXTINCTION_GUARD:
            # c is linear in t near extinction for constant-curvature data
            cdot = ev.theta_dot[0] if family.kind == "conformal" else c * ev.theta_dot[0]
            trace.extinction_estimate = t + c / (-cdot) if cdot < 0 else None
            trace.status = "extinct"
            trace.message = f"conformal factor {c:.4g} below guard {EXTINCTION_GUARD}"
            return trace
        if step == config.steps:
            break
        try:
            theta, _ = parametric_flow_step(family, theta, config, t, samples, weights)
        except BoundsExceeded as exc:
            trace.status = "bounds"
            trace.message = str(exc)
            return trace
        t = t0 + (step + 1) * config.dt
    trace.status = "completed"
    return trace


def observed_order(errors, dts):
    """Least-squares slope of log(error) against log(dt)."""
    e = np.log(np.asarray(errors, dtype=float))
    h = np.log(np.asarray(dts, dtype=float))
    return float(np.polyfit(h, e, 1)[0])
