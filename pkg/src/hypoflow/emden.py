"""Self-consistent equilibrium: the Poisson-Emden fixed point and the perturbed operators."""
from dataclasses import dataclass
import math

import numpy as np

from . import _kernels
from .operators import GridPotential, assemble


class EmdenConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Mollifier:
    """Gaussian mollifier sampled at the 2n-1 lattice offsets ``k h``."""
    sigma_zeta: float
    h: float
    kvals: np.ndarray

    @property
    def n(self):
        return (self.kvals.size + 1) // 2

    @property
    def mass(self):
        return self.h * float(self.kvals.sum())


def make_mollifier(disc, sigma=0.5):
    if not sigma > 0:
        raise ValueError("mollifier width must be positive")
    n = disc.n_x
    k = np.arange(-(n - 1), n) * disc.h
    z = np.exp(-0.5 * (k / sigma) ** 2)
    z /= disc.h * z.sum()
    return Mollifier(sigma_zeta=float(sigma), h=disc.h, kvals=z)


def convolve(kvals, g, h):
    """(k * g)(x_i) by direct quadrature over the grid."""
    return _kernels.toeplitz_conv(kvals, g, h)


def _abs_kernel(n, h):
    return np.abs(np.arange(-(n - 1), n)) * h


def _sign_kernel(n):
    return np.sign(np.arange(-(n - 1), n)).astype(float)


def green_apply(disc, f):
    """Dirichlet Green operator of -d^2/dx^2 on [-x_max, x_max], applied by quadrature.

    Uses G(x, y) = x_max/2 - |x - y|/2 - x y / (2 x_max), which coincides with
    (x_max - max)(min + x_max) / (2 x_max).
    """
    h, L, x = disc.h, disc.x_max, disc.nodes
    f = np.asarray(f, dtype=float)
    mass = h * f.sum()
    first = h * float(np.dot(x, f))
    return 0.5 * L * mass - 0.5 * convolve(_abs_kernel(disc.n_x, h), f, h) - x * first / (2 * L)


def green_matrix(disc):
    x, L = disc.nodes, disc.x_max
    X, Y = np.meshgrid(x, x, indexing="ij")
    return (L - np.maximum(X, Y)) * (np.minimum(X, Y) + L) / (2 * L) * disc.h


def green_derivative(disc, f):
    """d/dx of ``green_apply(disc, f)`` at the nodes (exact for the piecewise kernel)."""
    h, L, x = disc.h, disc.x_max, disc.nodes
    first = h * float(np.dot(x, f))
    return -0.5 * convolve(_sign_kernel(disc.n_x), f, h) - first / (2 * L)


def second_difference(u, h):
    """Three-point second difference with zero Dirichlet values outside the grid."""
    p = np.concatenate([[0.0], u, [0.0]])
    return (p[2:] - 2.0 * p[1:-1] + p[:-2]) / h ** 2


def density(V_total, h):
    w = np.exp(-(V_total - V_total.min()))
    return w / (h * w.sum())


@dataclass(frozen=True)
class EmdenSolution:
    V_inf: np.ndarray
    residual: float
    iterations: int
    kappa: float
    theta: float
    x: np.ndarray
    dV_inf: np.ndarray
    d2V_inf: np.ndarray
    rho: np.ndarray
    x_max: float


def emden_residual(disc, Vpot, V, mol, kappa):
    g = convolve(mol.kvals, density(Vpot + V, disc.h), disc.h)
    return float(np.max(np.abs(-second_difference(V, disc.h) - kappa * g)))


def solve_emden(pot, mol, kappa, disc, tol=1e-8, theta=0.5, max_iter=1000, kappa_max=50.0):
    """Damped fixed point V <- (1 - theta) V + theta G[kappa zeta * rho(V)].

    Stops once the sup-norm residual of -V'' = kappa zeta * rho(V + V_pot)
    (second difference at the nodes) drops below ``tol``.
    """
    if abs(kappa) > kappa_max:
        raise ValueError(f"|kappa| = {abs(kappa)} outside the supported range [0, {kappa_max}]")
    if not 0 < theta <= 1:
        raise ValueError("damping theta must lie in (0, 1]")
    h = disc.h
    x = disc.nodes
    Vpot = np.asarray(pot.on_grid(x)[0], dtype=float)
    V = np.zeros(disc.n_x)
    it = 0
    res = emden_residual(disc, Vpot, V, mol, kappa)
    while res > tol:
        if it >= max_iter:
            raise EmdenConvergenceError(f"no convergence after {max_iter} iterations (residual {res:.3e})")
        T = green_apply(disc, kappa * convolve(mol.kvals, density(Vpot + V, h), h))
        V = (1.0 - theta) * V + theta * T
        it += 1
        res = emden_residual(disc, Vpot, V, mol, kappa)
    g = kappa * convolve(mol.kvals, density(Vpot + V, h), h)
    return EmdenSolution(V_inf=V, residual=res, iterations=it, kappa=float(kappa), theta=float(theta),
                         x=x, dV_inf=green_derivative(disc, g), d2V_inf=-g,
                         rho=density(Vpot + V, h), x_max=disc.x_max)


def total_potential(pot, sol, disc):
    x = disc.nodes
    V, dV, d2V = (np.asarray(t, dtype=float) for t in pot.on_grid(x))
    vals = V + sol.V_inf
    cvh = pot.hess_sup(disc.x_max) + float(np.max(np.abs(sol.d2V_inf), initial=0.0))
    return GridPotential(x=x, values=vals - vals.min(), d1=dV + sol.dV_inf, d2=d2V + sol.d2V_inf,
                         C_V_hess=cvh)


def equilibrium(pot, sol, disc):
    """Flat equilibrium 1/2-power (sampled, unit norm) and the operators for V + V_inf."""
    if sol.kappa == 0.0:
        ops_inf = assemble(disc, pot)
    else:
        ops_inf = assemble(disc, total_potential(pot, sol, disc))
    return ops_inf.ground.copy(), ops_inf


def gap_inf(ops_inf):
    from .hypocoercivity import spectral_gap
    return spectral_gap(ops_inf)[0]


def equilibrium_mass(state, ops):
    """Quadrature of M = (M^{1/2})^2 for a flat state holding only Hermite mode 0."""
    c = ops.as_grid(state)
    return ops.h * float(np.sum(c[:, 0] ** 2))


def gauge_fixed(V, rho, h):
    """Remove the additive constant the Dirichlet box puts on V: subtract its rho-weighted mean."""
    return V - h * float(np.dot(rho, V)) / (h * float(np.sum(rho)))


def restrict_to(x_small, x_big, f_big):
    """Values of a fine-domain grid function at the nodes of a sub-domain with the same spacing."""
    idx = np.searchsorted(x_big, x_small - 1e-9)
    if np.max(np.abs(x_big[idx] - x_small)) > 1e-9 * max(1.0, np.abs(x_small).max()):
        raise ValueError("grids do not nest")
    return f_big[idx]


def doubled_domain(disc):
    """Same spacing on twice the half-width: n_x -> 2 n_x + 1 (nodes nest when n_x is odd)."""
    if disc.n_x % 2 == 0:
        raise ValueError("doubling keeps the nodes only for odd n_x")
    return type(disc)(n_x=2 * disc.n_x + 1, n_v=disc.n_v, x_max=2.0 * disc.x_max, gamma=disc.gamma)


def doubling_defect(pot, mol_sigma, disc, kappa, **kw):
    """Sup difference of gauge-fixed V_inf on the common nodes after doubling x_max."""
    big = doubled_domain(disc)
    a = solve_emden(pot, make_mollifier(disc, mol_sigma), kappa, disc, **kw)
    b = solve_emden(pot, make_mollifier(big, mol_sigma), kappa, big, **kw)
    Va = gauge_fixed(a.V_inf, a.rho, disc.h)
    Vb = restrict_to(disc.nodes, big.nodes, gauge_fixed(b.V_inf, b.rho, big.h))
    return float(np.max(np.abs(Va - Vb))), a, b


def linear_response(pot, mol, disc, kappas=(1e-3, 5e-4), **kw):
    """V_inf(kappa)/kappa at two small kappa, to probe the first-order response."""
    out = []
    for k in kappas:
        s = solve_emden(pot, mol, k, disc, **kw)
        out.append(s.V_inf / k)
    return out


def sup_bound(pot, mol, disc, kappa):
    """|kappa| |G|_inf |zeta * rho|_inf with rho the unperturbed density."""
    h = disc.h
    rho = density(np.asarray(pot.on_grid(disc.nodes)[0]), h)
    g = convolve(mol.kvals, rho, h)
    Gn = np.abs(green_matrix(disc)).sum(axis=1).max()
    return abs(kappa) * Gn * float(np.max(np.abs(g)))


def hermite_norm_check(h, f):
    return math.sqrt(h) * float(np.linalg.norm(f))
