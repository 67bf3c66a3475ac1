"""Phase-space operators of the flat (Maxwellian-conjugated) Fokker-Planck problem.

Unknowns are coefficient vectors indexed x-major, ``k = i*n_v + m`` with ``i``
an interior grid node and ``m`` a Hermite mode.  Position derivatives use a
five-point antisymmetric centred stencil under homogeneous Dirichlet
truncation; the velocity ladder is exact in the Hermite basis.
"""
from dataclasses import dataclass, field
import math

import numpy as np
from numpy.polynomial import Polynomial
import scipy.sparse as sp
from scipy.integrate import trapezoid
from scipy.sparse.linalg import norm as spnorm

# five-point centred first derivative: (10 (u+1 - u-1) - (u+2 - u-2)) / (16 h)
STENCIL = (10.0 / 16.0, -1.0 / 16.0)
MAX_SIZE = 600_000


@dataclass(frozen=True)
class Potential:
    """Confining polynomial potential, shifted so that its global minimum is 0."""
    kind: str
    params: tuple
    poly: Polynomial
    offset: float
    x_max: float
    C_V_hess: float

    def V(self, x):
        return self.poly(x)

    def dV(self, x):
        return self.poly.deriv(1)(x)

    def d2V(self, x):
        return self.poly.deriv(2)(x)

    def on_grid(self, x):
        x = np.asarray(x, dtype=float)
        return self.V(x), self.dV(x), self.d2V(x)

    def hess_sup(self, x_max):
        return _sup_abs(self.poly.deriv(2), x_max)


@dataclass(frozen=True)
class GridPotential:
    """Potential known only through node values (used for V + V_inf)."""
    x: np.ndarray
    values: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    C_V_hess: float
    kind: str = "grid"

    def on_grid(self, x):
        if x.shape != self.x.shape or np.max(np.abs(x - self.x)) > 1e-12:
            raise ValueError("grid potential evaluated off its own grid")
        return self.values, self.d1, self.d2

    def hess_sup(self, x_max):
        return self.C_V_hess


@dataclass(frozen=True)
class Discretization:
    n_x: int = 256
    n_v: int = 32
    x_max: float = 8.0
    gamma: float = 1.0
    d: int = 1

    def __post_init__(self):
        if self.d != 1:
            raise ValueError("only one position dimension is supported")
        if self.n_x < 16 or self.n_v < 8:
            raise ValueError(f"need n_x >= 16 and n_v >= 8, got n_x={self.n_x}, n_v={self.n_v}")
        if not self.x_max > 0 or not self.gamma > 0:
            raise ValueError("x_max and gamma must be positive")

    @property
    def h(self):
        return 2.0 * self.x_max / (self.n_x + 1)

    @property
    def nodes(self):
        return -self.x_max + self.h * np.arange(1, self.n_x + 1)

    @property
    def size(self):
        return self.n_x * self.n_v


@dataclass(frozen=True)
class OperatorSet:
    a: sp.csr_matrix
    a_star: sp.csr_matrix
    b: sp.csr_matrix
    b_star: sp.csr_matrix
    X0: sp.csr_matrix
    K: sp.csr_matrix
    K_star: sp.csr_matrix
    Lambda2: sp.csr_matrix
    ground: np.ndarray
    disc: Discretization
    pot: object
    # one-dimensional factors, kept for separable solves and diagnostics
    Dx: sp.csr_matrix = field(repr=False)
    ax: sp.csr_matrix = field(repr=False)
    B: sp.csr_matrix = field(repr=False)
    dV: np.ndarray = field(repr=False)
    d2V: np.ndarray = field(repr=False)
    C_V_hess: float = 0.0

    @property
    def n(self):
        return self.disc.size

    @property
    def h(self):
        return self.disc.h

    def inner(self, u, w):
        return self.h * float(np.dot(u, w))

    def norm(self, u):
        return math.sqrt(self.h) * float(np.linalg.norm(u))

    def as_grid(self, u):
        """View a state as an (n_x, n_v) coefficient array."""
        return np.asarray(u).reshape(self.disc.n_x, self.disc.n_v)


def _sup_abs(p, x_max):
    pts = [-x_max, x_max]
    if p.degree() >= 1:
        for r in p.deriv().roots():
            if abs(r.imag) < 1e-12 and abs(r.real) <= x_max:
                pts.append(r.real)
    return float(max(abs(p(x)) for x in pts))


def _global_min(p):
    crit = [r.real for r in p.deriv().roots() if abs(r.imag) < 1e-9]
    if not crit:
        raise ValueError("potential has no critical point")
    return float(min(p(x) for x in crit))


def build_potential(kind, params=None, x_max=8.0):
    """Build a confining polynomial potential.

    :param kind: ``quadratic`` (alias ``harmonic``), ``quartic_double_well`` or ``polynomial``
    :param params: ``{"omega": w}`` for quadratic, ``{"a": a, "b": b}`` for the
        double well ``a (x^2 - b)^2 / 4``, ``{"coeffs": [c0, c1, ...]}`` (ascending) otherwise
    :param x_max: half-width of the sweep domain used for ``C_V_hess`` and the
        confinement check
    """
    params = dict(params or {})
    if kind in ("quadratic", "harmonic"):
        kind = "quadratic"
        w = float(params.get("omega", 1.0))
        if not w > 0:
            raise ValueError(f"quadratic potential needs omega > 0, got {w}")
        poly = Polynomial([0.0, 0.0, 0.5 * w * w])
        key = (w,)
    elif kind == "quartic_double_well":
        a = float(params.get("a", 1.0))
        b = float(params.get("b", 1.0))
        if not a > 0:
            raise ValueError(f"double well needs a > 0, got {a}")
        poly = Polynomial([b * b, 0.0, -2.0 * b, 0.0, 1.0]) * (a / 4.0)
        key = (a, b)
    elif kind == "polynomial":
        coeffs = [float(c) for c in params.get("coeffs", [])]
        while coeffs and coeffs[-1] == 0.0:
            coeffs.pop()
        if len(coeffs) < 3:
            raise ValueError("polynomial potential must have degree >= 2")
        if (len(coeffs) - 1) % 2 == 1 or coeffs[-1] < 0:
            raise ValueError(
                f"non-confining polynomial: degree {len(coeffs) - 1} with leading coefficient {coeffs[-1]}")
        poly = Polynomial(coeffs)
        key = tuple(coeffs)
    else:
        raise ValueError(f"unknown potential kind {kind!r}")

    offset = -_global_min(poly)
    poly = poly + offset
    _check_confinement(poly, x_max)
    return Potential(kind=kind, params=key, poly=poly, offset=offset,
                     x_max=float(x_max), C_V_hess=_sup_abs(poly.deriv(2), x_max))


def _check_confinement(poly, x_max, n=4001):
    def trap(L):
        x = np.linspace(-L, L, n)
        return trapezoid(np.exp(-poly(x)), x)
    z1, z2 = trap(x_max), trap(2.0 * x_max)
    if not np.isfinite(z1) or abs(z2 - z1) > 1e-8 * z1:
        raise ValueError(f"e^-V not confined on [-{x_max}, {x_max}]: mass changes {z1} -> {z2}")


def first_derivative(n, h):
    """Antisymmetric five-point difference matrix with Dirichlet truncation."""
    c1, c2 = STENCIL[0] / h, STENCIL[1] / h
    return sp.diags([-c2, -c1, c1, c2], [-2, -1, 1, 2], shape=(n, n), format="csr")


def ladder(n_v, gamma):
    """Lowering operator in the Hermite basis: B psi_m = sqrt(gamma m) psi_{m-1}."""
    return sp.diags(np.sqrt(gamma * np.arange(1, n_v)), 1, shape=(n_v, n_v), format="csr")


def hermite_ground(n_v):
    e0 = np.zeros(n_v)
    e0[0] = 1.0
    return e0


def assemble(disc, pot, max_size=MAX_SIZE):
    """Assemble the flat operators on ``disc`` for potential ``pot``."""
    if disc.size > max_size:
        raise ValueError(f"n_x*n_v = {disc.size} exceeds max matrix size {max_size}")
    n_x, n_v, g = disc.n_x, disc.n_v, disc.gamma
    x = disc.nodes
    Vx, dV, d2V = pot.on_grid(x)
    Vx, dV, d2V = (np.asarray(t, dtype=float) for t in (Vx, dV, d2V))

    Dx = first_derivative(n_x, disc.h)
    W = sp.diags(dV)
    ax = (math.sqrt(g) * (Dx + 0.5 * W)).tocsr()
    B = ladder(n_v, g)
    Bt = B.T.tocsr()
    Ix, Iv = sp.identity(n_x, format="csr"), sp.identity(n_v, format="csr")

    v_op = (B + Bt) / math.sqrt(g)
    dv_op = (B - Bt) / (2.0 * math.sqrt(g))
    X0 = (sp.kron(Dx, v_op) - sp.kron(W, dv_op)).tocsr()
    a = sp.kron(ax, Iv, format="csr")
    b = sp.kron(Ix, B, format="csr")
    a_star = a.T.tocsr()
    b_star = b.T.tocsr()
    N = (b_star @ b).tocsr()
    K = (X0 + N).tocsr()
    K_star = K.T.tocsr()
    AA = (a_star @ a).tocsr()
    Lambda2 = (0.5 * (AA + AA.T) + N).tocsr()

    gx = np.exp(-0.5 * (Vx - Vx.min()))
    ground = np.kron(gx, hermite_ground(n_v))
    ground /= math.sqrt(disc.h) * np.linalg.norm(ground)

    return OperatorSet(a=a, a_star=a_star, b=b, b_star=b_star, X0=X0, K=K, K_star=K_star,
                       Lambda2=Lambda2, ground=ground, disc=disc, pot=pot, Dx=Dx, ax=ax, B=B,
                       dV=dV, d2V=d2V, C_V_hess=float(pot.hess_sup(disc.x_max)))


def _commutator(A, Bm):
    return (A @ Bm - Bm @ A).tocsr()


def below_top(n_x, n_v):
    """Index mask of coefficients with Hermite mode m <= n_v - 2."""
    return np.tile(np.arange(n_v) <= n_v - 2, n_x)


def commutator_probe(disc, pot):
    """Smooth flat state used to measure the O(h^2) commutator residual."""
    x = disc.nodes
    Vx = pot.on_grid(x)[0]
    gx = (1.0 + 0.5 * x) * np.exp(-0.5 * (Vx - Vx.min()))
    cv = np.zeros(disc.n_v)
    cv[1], cv[2] = 1.0, 0.5
    u = np.kron(gx, cv)
    return u / (math.sqrt(disc.h) * np.linalg.norm(u))


def approx_residual(ops):
    """Flat norm of ([a, X0] + V'' b) applied to the smooth probe."""
    comm = _commutator(ops.a, ops.X0)
    corr = sp.kron(sp.diags(ops.d2V), ops.B, format="csr")
    u = commutator_probe(ops.disc, ops.pot)
    return ops.norm((comm + corr) @ u)


def check_commutators(ops, refine=True):
    """Algebraic-structure report.

    Returns a dict with the exact residual of [b, X0] = a below the top Hermite
    mode (the top mode sees the truncated raising operator), the same residual
    over the full space for reference, the X0 antisymmetry and sym(K) defects,
    the ladder identity bb* - b*b = gamma below the top mode, and the
    approximate residual r(h) of [a, X0] = -V'' b with its ratio r(h)/r(h/2).
    """
    n_x, n_v = ops.disc.n_x, ops.disc.n_v
    C = _commutator(ops.b, ops.X0) - ops.a
    keep = below_top(n_x, n_v)
    idx = np.flatnonzero(keep)
    C_low = C[idx][:, idx]
    a_norm = spnorm(ops.a)
    out = {
        "bX0_minus_a": float(spnorm(C_low)) if C_low.nnz else 0.0,
        "bX0_minus_a_full": float(spnorm(C)) if C.nnz else 0.0,
        "a_norm": float(a_norm),
        "X0_antisym": float(abs(ops.X0 + ops.X0.T).max()),
        "symK_defect": float(abs(ops.K + ops.K_star - 2.0 * (ops.b_star @ ops.b)).max()),
    }
    Bm, Bt = ops.B, ops.B.T
    lad = (Bm @ Bt - Bt @ Bm).toarray() - ops.disc.gamma * np.eye(n_v)
    out["ladder_defect"] = float(np.abs(lad[:n_v - 1, :n_v - 1]).max())
    r = approx_residual(ops)
    out["approx_residual"] = r
    if refine:
        d = ops.disc
        fine = Discretization(n_x=2 * d.n_x + 1, n_v=d.n_v, x_max=d.x_max, gamma=d.gamma)
        r2 = approx_residual(assemble(fine, ops.pot))
        out["approx_residual_fine"] = r2
        out["refinement_ratio"] = r / r2 if r2 > 0 else float("inf")
    return out


def dump_operators(ops, prefix, limit=4096):
    """Write every operator as dense text, one row per line."""
    if ops.n > limit:
        raise ValueError(f"refusing to dump dense matrices of size {ops.n} > {limit}")
    names = ["a", "a_star", "b", "b_star", "X0", "K", "K_star", "Lambda2"]
    paths = []
    for name in names:
        path = f"{prefix}.{name}.txt"
        np.savetxt(path, getattr(ops, name).toarray(), fmt="%.12e")
        paths.append(path)
    np.savetxt(f"{prefix}.ground.txt", ops.ground[None, :], fmt="%.12e")
    paths.append(f"{prefix}.ground.txt")
    return paths
