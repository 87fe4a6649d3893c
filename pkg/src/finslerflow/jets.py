"""Truncated multivariate Taylor arithmetic ("jets") and a finite-difference oracle.

A :class:`Jet` stores normalized Taylor coefficients ``c_a = d^a f / a!`` of a
(tensor-valued) function around a point.  Monomials live in a :class:`Basis`
made of variable *groups*; each group is truncated at its own total degree.
A single group gives the usual total-degree truncation, two groups give the
nested (inner x/y, outer vertical) jets used to differentiate curvature
quantities in ``y`` without finite differences.

Coefficients of degree above ``valid`` (tracked per group) are unreliable,
e.g. after differentiation, and are zeroed.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import SingularEvaluation, StepUnderflow


def _simple_exponents(nvars, degree):
    exps = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(nvars), total):
            e = [0] * nvars
            for v in combo:
                e[v] += 1
            exps.append(tuple(e))
    return exps


@lru_cache(maxsize=None)
def _simple_tables(nvars, degree):
    exps = _simple_exponents(nvars, degree)
    index = {e: i for i, e in enumerate(exps)}
    I, J, K = [], [], []
    for i, a in enumerate(exps):
        da = sum(a)
        for j, b in enumerate(exps):
            if da + sum(b) > degree:
                continue
            I.append(i)
            J.append(j)
            K.append(index[tuple(x + y for x, y in zip(a, b))])
    arr = np.array(exps, dtype=np.int64).reshape(len(exps), nvars)
    return arr, np.array(I), np.array(J), np.array(K)


@dataclass(frozen=True, eq=False)
class Basis:
    """Monomial basis: Cartesian product of total-degree-truncated variable groups."""

    groups: tuple
    exps: np.ndarray = field(repr=False)
    pair_i: np.ndarray = field(repr=False)
    pair_j: np.ndarray = field(repr=False)
    scatter: sp.csr_matrix = field(repr=False)  # (size, npairs): pair -> product monomial
    group_degree: np.ndarray = field(repr=False)

    @property
    def size(self):
        return self.exps.shape[0]

    @property
    def nvars(self):
        return self.exps.shape[1]

    @property
    def degree(self):
        return sum(d for _, d in self.groups)

    def group_of(self, var):
        off = 0
        for g, (m, _) in enumerate(self.groups):
            if var < off + m:
                return g
            off += m
        raise IndexError(var)

    def offset(self, group):
        return sum(m for m, _ in self.groups[:group])

    @property
    def index(self):
        return _basis_index(self)

    def shift(self, var):
        return _basis_shift(self, var)


@lru_cache(maxsize=None)
def _basis_index(b):
    return {tuple(int(v) for v in e): i for i, e in enumerate(b.exps)}


@lru_cache(maxsize=None)
def _basis_shift(b, var):
    """Source index and factor for differentiation by ``var``."""
    idx = b.index
    src = np.full(b.size, -1, dtype=np.int64)
    fac = np.zeros(b.size)
    for k, e in enumerate(b.exps):
        up = list(int(v) for v in e)
        up[var] += 1
        j = idx.get(tuple(up))
        if j is not None:
            src[k] = j
            fac[k] = up[var]
    return src, fac


@lru_cache(maxsize=None)
def basis(*groups):
    """Build (and cache) the product basis for ``groups = ((nvars, degree), ...)``."""
    groups = tuple((int(m), int(d)) for m, d in groups)
    exps = np.zeros((1, 0), dtype=np.int64)
    I = J = K = np.zeros(1, dtype=np.int64)
    gdeg = np.zeros((1, 0), dtype=np.int64)
    for m, d in groups:
        e2, I2, J2, K2 = _simple_tables(m, d)
        n1, n2 = exps.shape[0], e2.shape[0]
        exps = np.hstack([np.repeat(exps, n2, axis=0), np.tile(e2, (n1, 1))])
        gdeg = np.hstack([np.repeat(gdeg, n2, axis=0), np.tile(e2.sum(axis=1, keepdims=True), (n1, 1))])
        I = (I[:, None] * n2 + I2[None, :]).ravel()
        J = (J[:, None] * n2 + J2[None, :]).ravel()
        K = (K[:, None] * n2 + K2[None, :]).ravel()
    size = exps.shape[0]
    scatter = sp.csr_matrix((np.ones(K.size), (K, np.arange(K.size))), shape=(size, K.size))
    return Basis(groups, exps, I, J, scatter, gdeg)


class Jet:
    """Tensor-valued truncated Taylor expansion; leading axes are tensor indices."""

    __array_priority__ = 1000
    __slots__ = ("coef", "basis", "valid")

    def __init__(self, coef, basis, valid=None):
        self.coef = coef
        self.basis = basis
        self.valid = tuple(d for _, d in basis.groups) if valid is None else tuple(valid)

    # -- construction ---------------------------------------------------
    @classmethod
    def constant(cls, value, b):
        value = np.asarray(value, dtype=float)
        coef = np.zeros(value.shape + (b.size,))
        coef[..., 0] = value
        return cls(coef, b)

    @classmethod
    def variables(cls, point, b, first_var):
        """Vector jet ``point + (t_first, t_first+1, ...)``."""
        point = np.asarray(point, dtype=float)
        n = point.shape[0]
        coef = np.zeros((n, b.size))
        coef[:, 0] = point
        idx = b.index
        for i in range(n):
            e = [0] * b.nvars
            e[first_var + i] = 1
            coef[i, idx[tuple(e)]] = 1.0
        return cls(coef, b)

    @staticmethod
    def stack(items, b=None):
        items = list(items)
        b = b or next(it.basis for it in items if isinstance(it, Jet))
        coefs = []
        valid = tuple(d for _, d in b.groups)
        for it in items:
            if isinstance(it, Jet):
                coefs.append(it.coef)
                valid = tuple(min(v, w) for v, w in zip(valid, it.valid))
            else:
                coefs.append(Jet.constant(it, b).coef)
        return Jet(np.stack(coefs), b, valid)

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.coef.shape[:-1]

    @property
    def value(self):
        return self.coef[..., 0]

    def __getitem__(self, key):
        return Jet(self.coef[key], self.basis, self.valid)

    def __len__(self):
        return self.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __repr__(self):
        return f"Jet(shape={self.shape}, groups={self.basis.groups}, valid={self.valid})"

    def _merge_valid(self, other):
        if isinstance(other, Jet):
            return tuple(min(a, b) for a, b in zip(self.valid, other.valid))
        return self.valid

    def _coef_of(self, other):
        if isinstance(other, Jet):
            return other.coef
        return Jet.constant(other, self.basis).coef

    def __add__(self, other):
        return Jet(self.coef + self._coef_of(other), self.basis, self._merge_valid(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Jet(self.coef - self._coef_of(other), self.basis, self._merge_valid(other))

    def __rsub__(self, other):
        return Jet(self._coef_of(other) - self.coef, self.basis, self.valid)

    def __neg__(self):
        return Jet(-self.coef, self.basis, self.valid)

    def __mul__(self, other):
        if isinstance(other, Jet):
            b = self.basis
            prod = self.coef[..., b.pair_i] * other.coef[..., b.pair_j]
            return Jet(_scatter(prod, b), b, self._merge_valid(other))
        other = np.asarray(other, dtype=float)
        return Jet(self.coef * other[..., None], self.basis, self.valid)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * reciprocal(other)
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        return reciprocal(self) * other

    def __pow__(self, k):
        if isinstance(k, (int, np.integer)) and k >= 0:
            out = Jet.constant(np.ones(self.shape), self.basis)
            for _ in range(k):
                out = out * self
            return out
        return power(self, float(k))

    def sum(self, axis=0):
        axis = axis if axis >= 0 else axis - 1
        return Jet(self.coef.sum(axis=axis), self.basis, self.valid)

    # -- calculus -------------------------------------------------------
    def d(self, var):
        """Partial derivative with respect to basis variable ``var``."""
        src, fac = self.basis.shift(var)
        coef = np.zeros_like(self.coef)
        ok = src >= 0
        coef[..., ok] = self.coef[..., src[ok]] * fac[ok]
        valid = list(self.valid)
        g = self.basis.group_of(var)
        valid[g] -= 1
        out = Jet(coef, self.basis, valid)
        out._clean()
        return out

    def _clean(self):
        bad = _invalid_mask(self.basis, self.valid)
        if bad is not None:
            self.coef[..., bad] = 0.0

    def derivative(self, multi):
        """Value of the partial derivative ``d^multi`` at the expansion point."""
        multi = tuple(int(v) for v in multi)
        k = self.basis.index[multi]
        return self.coef[..., k] * float(np.prod([math.factorial(v) for v in multi]))

    def restrict(self, small):
        """Re-express in a smaller basis whose monomials all exist in ours."""
        idx = self.basis.index
        take = np.array([idx[tuple(int(v) for v in e)] for e in small.exps])
        valid = tuple(min(v, d) for v, (_, d) in zip(self.valid, small.groups))
        return Jet(self.coef[..., take], small, valid)

    def slice_group(self, group, multi):
        """Jet over the remaining groups of ``d^multi/d(group vars)`` at group origin."""
        multi = tuple(int(v) for v in multi)
        rb, take, fact = _slice_table(self.basis, group, multi)
        valid = tuple(v for i, v in enumerate(self.valid) if i != group)
        return Jet(self.coef[..., take] * fact, rb, valid)


@lru_cache(maxsize=None)
def _invalid_mask(b, valid):
    bad = np.any(b.group_degree > np.array(valid, dtype=np.int64)[None, :], axis=1)
    return bad if bad.any() else None


@lru_cache(maxsize=None)
def _slice_table(b, group, multi):
    rest = tuple(g for i, g in enumerate(b.groups) if i != group)
    rb = basis(*rest)
    off = b.offset(group)
    fact = float(np.prod([math.factorial(v) for v in multi]))
    idx = b.index
    take = []
    for e in rb.exps:
        full = tuple(int(v) for v in e[:off]) + multi + tuple(int(v) for v in e[off:])
        take.append(idx[full])
    return rb, np.array(take, dtype=np.int64), fact


def _scatter(prod, b):
    lead = prod.shape[:-1]
    flat = prod.reshape(-1, prod.shape[-1])
    out = (b.scatter @ flat.T).T
    return np.asarray(out).reshape(lead + (b.size,))


def einsum(subscripts, a, b):
    """Two-operand einsum where either operand may be a Jet or a plain array."""
    a_jet, b_jet = isinstance(a, Jet), isinstance(b, Jet)
    if not (a_jet or b_jet):
        return np.einsum(subscripts, a, b)
    ins, out = subscripts.split("->")
    sa, sb = ins.split(",")
    if a_jet and b_jet:
        bs = a.basis
        prod = np.einsum(f"{sa}z,{sb}z->{out}z", a.coef[..., bs.pair_i], b.coef[..., bs.pair_j])
        return Jet(_scatter(prod, bs), bs, a._merge_valid(b))
    if a_jet:
        return Jet(np.einsum(f"{sa}z,{sb}->{out}z", a.coef, np.asarray(b, dtype=float)), a.basis, a.valid)
    return Jet(np.einsum(f"{sa},{sb}z->{out}z", np.asarray(a, dtype=float), b.coef), b.basis, b.valid)


def _compose(u, taylor_coefs):
    """Evaluate sum_k taylor_coefs[k] * (u - u0)^k with elementwise coefficient arrays."""
    u0 = u.value
    nil = Jet(u.coef.copy(), u.basis, u.valid)
    nil.coef[..., 0] = 0.0
    out = Jet.constant(taylor_coefs[0], u.basis)
    out.valid = u.valid
    term = None
    for k in range(1, len(taylor_coefs)):
        term = nil if term is None else term * nil
        out = out + term * taylor_coefs[k]
    return out


def _order(u):
    return sum(u.valid)


def _real(u):
    # keeps extended precision when the finite-difference oracle asks for it
    u = np.asarray(u)
    return u if u.dtype == np.longdouble else u.astype(float)


def power(u, p):
    if not isinstance(u, Jet):
        u = _real(u)
        if np.any(u <= 0) and not float(p).is_integer():
            raise SingularEvaluation(f"non-positive base {u} for power {p}")
        return u ** p
    u0 = u.value
    if np.any(u0 == 0) or (np.any(u0 < 0) and not float(p).is_integer()):
        raise SingularEvaluation(f"jet power {p} of value {u0}")
    coefs = []
    c = 1.0
    for k in range(_order(u) + 1):
        coefs.append(c * u0 ** (p - k))
        c *= (p - k) / (k + 1)
    return _compose(u, coefs)


def sqrt(u):
    if not isinstance(u, Jet):
        u = _real(u)
        if np.any(u < 0):
            raise SingularEvaluation(f"sqrt of negative value {u}")
        return np.sqrt(u)
    if np.any(u.value <= 0):
        raise SingularEvaluation(f"sqrt jet at non-positive value {u.value}")
    return power(u, 0.5)


def reciprocal(u):
    if not isinstance(u, Jet):
        u = _real(u)
        if np.any(u == 0):
            raise SingularEvaluation("reciprocal of zero")
        return 1.0 / u
    u0 = u.value
    if np.any(u0 == 0):
        raise SingularEvaluation("reciprocal jet at zero")
    coefs = [(-1.0) ** k / u0 ** (k + 1) for k in range(_order(u) + 1)]
    return _compose(u, coefs)


def inverse(a):
    """Matrix inverse of a (n, n) jet by a terminating Neumann series."""
    if not isinstance(a, Jet):
        return np.linalg.inv(a)
    b0 = np.linalg.inv(a.value)
    nil = Jet(a.coef.copy(), a.basis, a.valid)
    nil.coef[..., 0] = 0.0
    m = -einsum("ik,kj->ij", b0, nil)
    acc = Jet.constant(b0, a.basis)
    acc.valid = a.valid
    term = acc
    for _ in range(_order(a)):
        term = einsum("ik,kj->ij", m, term)
        acc = acc + term
    return acc


# -- finite-difference oracle -------------------------------------------

@dataclass(frozen=True)
class FDConfig:
    """Central differences with Richardson extrapolation.

    ``base_step`` is relative: the step on an axis is ``base_step * (1 + |z|)``
    scaled by ``order_scale[k]`` for a derivative of total order ``k``.
    ``extended`` places stencil points and evaluates ``f`` in ``np.longdouble``,
    which lowers the round-off floor of high-order differences where the
    platform provides 80-bit floats.
    """

    base_step: float = 1e-3
    richardson_levels: int = 2
    order_scale: tuple = (1.0, 1.0, 2.0, 5.0, 10.0)
    extended: bool = False

    def __post_init__(self):
        if not self.base_step > 0:
            raise ValueError("base_step must be positive")
        if self.richardson_levels < 1:
            raise ValueError("richardson_levels must be >= 1")

    def step(self, z, order):
        scale = self.order_scale[min(order, len(self.order_scale) - 1)]
        return self.base_step * scale * (1.0 + float(np.linalg.norm(z)))


def _central_weights(k):
    # second-order accurate central stencils: offsets, weights
    return {
        0: ([0], [1.0]),
        1: ([-1, 1], [-0.5, 0.5]),
        2: ([-1, 0, 1], [1.0, -2.0, 1.0]),
        3: ([-2, -1, 1, 2], [-0.5, 1.0, -1.0, 0.5]),
        4: ([-2, -1, 0, 1, 2], [1.0, -4.0, 6.0, -4.0, 1.0]),
    }[k]


def _fd_once(f, z, multi, h):
    # one axis at a time, so a function independent of an axis differences to exactly 0
    axes = [(v, k) for v, k in enumerate(multi) if k]

    def nest(zz, depth):
        if depth == len(axes):
            return _real(f(zz))
        v, k = axes[depth]
        offs, wts = _central_weights(k)
        total = 0.0
        for o, w in zip(offs, wts):
            shifted = zz.copy()
            shifted[v] += o * h
            total = total + w * nest(shifted, depth + 1)
        return total

    return nest(np.asarray(z), 0) / h ** sum(multi)


# default for the independent derivative route: extended precision keeps the
# round-off of order-4 stencils well below 1e-8
ORACLE_FD = FDConfig(extended=True)


@dataclass(frozen=True)
class FDResult:
    value: np.ndarray
    error: float


def fd_derivative(f, z, multi, config=ORACLE_FD, domain=None):
    """Richardson-extrapolated central difference of ``f`` at ``z``.

    ``multi`` is a multi-index over the components of ``z``; ``f`` may be
    scalar or array valued.  ``domain(z) -> bool`` rejects stencil points; the
    step is halved until every stencil point is inside (``StepUnderflow``
    after 20 halvings).
    """
    multi = tuple(int(v) for v in multi)
    if sum(multi) > 4:
        raise ValueError("fd oracle supports derivatives of total order <= 4")
    order = sum(multi)
    z = np.asarray(z, dtype=np.longdouble if config.extended else float)
    if order == 0:
        return FDResult(np.asarray(f(z), dtype=float), 0.0)
    h = config.step(z, order)
    if config.extended:
        h = np.longdouble(h)
    return _richardson(f, z, multi, h, config.richardson_levels, domain)


def _richardson(f, z, multi, h, levels, domain):
    for _ in range(20):
        if domain is None or _stencil_inside(domain, z, multi, h):
            break
        h *= 0.5
    else:
        raise StepUnderflow(f"no admissible step at {z}")
    table = [[_fd_once(f, z, multi, h / 2 ** i)] for i in range(levels + 1)]
    for j in range(1, levels + 1):
        for i in range(j, levels + 1):
            fac = 4.0 ** j
            table[i].append((fac * table[i][j - 1] - table[i - 1][j - 1]) / (fac - 1.0))
    best = table[levels][levels]
    prev = table[levels][levels - 1]
    return FDResult(np.asarray(best, dtype=float), float(np.max(np.abs(best - prev))))


def _stencil_inside(domain, z, multi, h):
    axes = [(v, _central_weights(k)[0]) for v, k in enumerate(multi) if k]
    for offs in itertools.product(*[o for _, o in axes]):
        zz = np.array(z)
        for (v, _), o in zip(axes, offs):
            zz[v] += o * h
        if not domain(zz):
            return False
    return True


def multi_indices(nvars, order):
    """All multi-indices of exactly ``order`` over ``nvars`` variables (sorted tuples form)."""
    out = []
    for combo in itertools.combinations_with_replacement(range(nvars), order):
        e = [0] * nvars
        for v in combo:
            e[v] += 1
        out.append(tuple(e))
    return out


def symmetric_tensor(values, nvars, order):
    """Fill a fully symmetric tensor from a ``{multi_index: value}`` mapping."""
    t = np.zeros((nvars,) * order)
    for idx in itertools.product(range(nvars), repeat=order):
        e = [0] * nvars
        for v in idx:
            e[v] += 1
        t[idx] = values[tuple(e)]
    return t


# -- derivative tensors of a field on TM ----------------------------------

def _tensor_from_jet(J, first_var, count, order, n):
    vals = {}
    for multi in multi_indices(n, order):
        full = [0] * J.basis.nvars
        full[first_var:first_var + n] = multi
        vals[multi] = J.derivative(full)
    return symmetric_tensor(vals, n, order) if order else J.derivative([0] * J.basis.nvars)


def mixed_jet(f, x, y, x_order, y_order, mode="taylor", fd=ORACLE_FD, domain=None, max_total=4):
    """Derivative tensors ``{(a, b): d^a_x d^b_y f}`` at (x, y).

    Tensors have ``a`` leading x-indices followed by ``b`` y-indices.  Only
    pairs with ``a + b <= max_total`` are produced.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    pairs = [(a, bb) for a in range(x_order + 1) for bb in range(y_order + 1) if a + bb <= max_total]
    out = {}
    if mode == "taylor":
        b = basis((2 * n, max(a + bb for a, bb in pairs)))
        J = f(Jet.variables(x, b, 0), Jet.variables(y, b, n))
        for a, bb in pairs:
            out[(a, bb)] = _mixed_tensor(lambda multi: J.derivative(multi), n, a, bb)
        return out
    if mode != "finite_difference":
        raise ValueError(f"unknown mode {mode!r}")
    z0 = np.concatenate([x, y])
    values = {}

    def g(z):
        # stencils of one order share most of their points
        key = z.tobytes()
        if key not in values:
            values[key] = f(z[:n], z[n:])
        return values[key]

    inside = {}

    def dom(z):
        key = z.tobytes()
        if key not in inside:
            inside[key] = domain(z[:n], z[n:])
        return inside[key]

    if domain is None:
        dom = None
    cache = {}

    def fd_at(multi):
        key = tuple(multi)
        if key not in cache:
            cache[key] = fd_derivative(g, z0, multi, fd, dom).value
        return cache[key]

    for a, bb in pairs:
        out[(a, bb)] = _mixed_tensor(fd_at, n, a, bb)
    return out


def _mixed_tensor(deriv, n, a, b):
    if a == 0 and b == 0:
        return np.asarray(deriv([0] * (2 * n)), dtype=float)
    t = np.zeros((n,) * (a + b))
    seen = {}
    for idx in itertools.product(range(n), repeat=a + b):
        e = [0] * (2 * n)
        for v in idx[:a]:
            e[v] += 1
        for v in idx[a:]:
            e[n + v] += 1
        key = tuple(e)
        if key not in seen:
            seen[key] = float(deriv(e))
        t[idx] = seen[key]
    return t


def vertical_jet(f, sample, order, mode="taylor", fd=ORACLE_FD, domain=None):
    """[value, grad_y, hess_y, third_y] up to ``order`` (1..3) at fixed x."""
    if order not in (1, 2, 3):
        raise ValueError("vertical order must be 1, 2 or 3")
    t = mixed_jet(f, sample.x, sample.y, 0, order, mode, fd, domain, max_total=order)
    return [t[(0, k)] for k in range(order + 1)]


def horizontal_jet(f, sample, order, mode="taylor", fd=ORACLE_FD, domain=None):
    """[value, grad_x, hess_x] up to ``order`` (1..2) at fixed y."""
    if order not in (1, 2):
        raise ValueError("horizontal order must be 1 or 2")
    t = mixed_jet(f, sample.x, sample.y, order, 0, mode, fd, domain, max_total=order)
    return [t[(k, 0)] for k in range(order + 1)]


def fd_oracle(f, sample, multi_index, config=ORACLE_FD, domain=None):
    """FD derivative of ``f(x, y)``; ``multi_index`` runs over (x_1..x_n, y_1..y_n)."""
    x = np.asarray(sample.x, dtype=float)
    n = x.shape[0]
    z0 = np.concatenate([x, np.asarray(sample.y, dtype=float)])
    dom = None if domain is None else (lambda z: domain(z[:n], z[n:]))
    return fd_derivative(lambda z: f(z[:n], z[n:]), z0, multi_index, config, dom)
