"""Semigroup e^{-tK}: time stepping, operator-norm scans and the Lyapunov functional."""
from dataclasses import dataclass, field
import logging
import math
import weakref

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

log = logging.getLogger(__name__)

DENSE_MAX = 2500
MAX_HALVINGS = 12


@dataclass(frozen=True)
class EvolveParams:
    method: str = "crank_nicolson"
    dt: float = 0.05
    t_end: float = 1.0
    substep_tol: float = 1e-8

    def __post_init__(self):
        if self.method not in ("crank_nicolson", "dense_expm"):
            raise ValueError(f"unknown method {self.method!r}")
        if not (self.dt > 0 and self.t_end > 0 and self.substep_tol > 0):
            raise ValueError("dt, t_end and substep_tol must be positive")
        if self.dt > self.t_end * (1 + 1e-12):
            raise ValueError("dt must not exceed t_end")

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))


@dataclass(frozen=True)
class DecayCurve:
    times: np.ndarray
    values: np.ndarray
    label: str = ""
    converged: np.ndarray = None

    def __post_init__(self):
        t, v = np.asarray(self.times), np.asarray(self.values)
        if t.shape != v.shape:
            raise ValueError("times and values must have equal lengths")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")


class ConvergenceError(RuntimeError):
    pass


class CrankNicolson:
    """Cayley steps u <- (I + dt K/2)^{-1} (I - dt K/2) u with cached factorizations."""

    def __init__(self, K):
        self.K = sp.csc_matrix(K)
        self.I = sp.identity(K.shape[0], format="csc")
        self._lu = {}

    def _factor(self, dt):
        key = float(dt)
        if key not in self._lu:
            self._lu[key] = splu((self.I + 0.5 * dt * self.K).tocsc())
        return self._lu[key]

    def step(self, u, dt, n=1, transpose=False):
        lu = self._factor(dt)
        if transpose:
            for _ in range(n):
                u = lu.solve(u - 0.5 * dt * (self.K.T @ u), trans="T")
        else:
            for _ in range(n):
                u = lu.solve(u - 0.5 * dt * (self.K @ u))
        return u


_CACHES = {}


def _cache(ops):
    # per-OperatorSet workspace (factorizations, dense copies); the set itself stays frozen
    key = id(ops)
    if key not in _CACHES:
        _CACHES[key] = {}
        weakref.finalize(ops, _CACHES.pop, key, None)
    return _CACHES[key]


def _propagator(ops):
    c = _cache(ops)
    if "cn" not in c:
        c["cn"] = CrankNicolson(ops.K)
    return c["cn"]


def _dense_K(ops):
    if ops.n > DENSE_MAX:
        raise ValueError(f"dense exponential limited to n <= {DENSE_MAX}, got {ops.n}")
    c = _cache(ops)
    if "K" not in c:
        c["K"] = ops.K.toarray()
    return c["K"]


def _cn_trajectory(cn, u0, dt, n_out, n_sub, transpose=False):
    out = np.empty((n_out + 1, u0.size))
    out[0] = u0
    u = u0
    for k in range(n_out):
        u = cn.step(u, dt / n_sub, n_sub, transpose)
        out[k + 1] = u
    return out


def evolve(ops, u0, p, return_substeps=False):
    """States at times 0, dt, ..., t_end.

    Crank-Nicolson substeps are halved until one more halving changes every
    output by less than ``substep_tol`` times ``max(1, |u0|)``; the returned
    trajectory uses the largest substep passing that test.
    """
    u0 = np.asarray(u0, dtype=float)
    if not np.all(np.isfinite(u0)):
        raise ValueError("initial state has non-finite entries")
    n_out = p.n_steps
    times = p.dt * np.arange(n_out + 1)
    if p.method == "dense_expm":
        E = sla.expm(-p.dt * _dense_K(ops))
        traj = np.empty((n_out + 1, u0.size))
        traj[0] = u0
        for k in range(n_out):
            traj[k + 1] = E @ traj[k]
        return (times, traj, 0) if return_substeps else (times, traj)

    cn = _propagator(ops)
    scale = max(1.0, ops.norm(u0))
    n_sub = 1
    coarse = _cn_trajectory(cn, u0, p.dt, n_out, n_sub)
    for _ in range(MAX_HALVINGS):
        fine = _cn_trajectory(cn, u0, p.dt, n_out, 2 * n_sub)
        diff = max(ops.norm(r) for r in fine - coarse)
        if diff < p.substep_tol * scale:
            return (times, coarse, n_sub) if return_substeps else (times, coarse)
        n_sub *= 2
        coarse = fine
    raise ConvergenceError(f"Crank-Nicolson refinement did not reach {p.substep_tol} "
                           f"after {MAX_HALVINGS} halvings (last difference {diff:.3e})")


class ExpAction:
    """u -> e^{-tK} u and its transpose at one fixed time.

    For Crank-Nicolson the substep count is fixed once by the refinement test
    on a probe vector and then reused, so the forward and transposed actions
    are exact transposes of each other.
    """

    def __init__(self, ops, t, method="crank_nicolson", substep_tol=1e-8, probe=None, n_sub=None):
        self.ops, self.t, self.method = ops, float(t), method
        if method == "dense_expm":
            self.E = sla.expm(-self.t * _dense_K(ops))
            self.n_sub = 0
            return
        self.cn = _propagator(ops)
        if n_sub is None:
            if probe is None:
                probe = np.random.default_rng(0).standard_normal(ops.n)
            p = EvolveParams("crank_nicolson", self.t, self.t, substep_tol)
            _, _, n_sub = evolve(ops, probe, p, return_substeps=True)
        self.n_sub = int(n_sub)

    def __call__(self, u):
        if self.method == "dense_expm":
            return self.E @ u
        return self.cn.step(u, self.t / self.n_sub, self.n_sub)

    def T(self, u):
        if self.method == "dense_expm":
            return self.E.T @ u
        return self.cn.step(u, self.t / self.n_sub, self.n_sub, transpose=True)


def power_norm(apply, apply_T, n, rng=None, iters=20, rtol=1e-6, x0=None):
    """Largest singular value of a linear map by power iteration on its Gram operator.

    :returns: (norm estimate, right singular vector estimate, converged flag)
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x = rng.standard_normal(n) if x0 is None else np.array(x0, dtype=float)
    x /= np.linalg.norm(x)
    sigma = 0.0
    for k in range(iters):
        y = apply(x)
        new = float(np.linalg.norm(y))
        z = apply_T(y)
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return 0.0, x, True
        x = z / nz
        if k > 0 and abs(new - sigma) <= rtol * max(new, 1e-300):
            return new, x, True
        sigma = new
    log.debug("power iteration stopped after %d iterations (sigma=%g)", iters, sigma)
    return sigma, x, False


SCAN_KINDS = ("b_e", "a_e", "e_bstar", "e_astar")


def opnorm_scan(ops, which, times, method="crank_nicolson", substep_tol=1e-8, seed=0,
                iters=20, rtol=1e-6, warm_start=False):
    """Operator norms of b e^{-tK}, a e^{-tK}, e^{-tK} b* or e^{-tK} a* at each t.

    Each power iteration starts from a fresh random vector unless ``warm_start``;
    the top singular vector at one t sits in modes already damped at the next.
    """
    if which not in SCAN_KINDS:
        raise ValueError(f"which must be one of {SCAN_KINDS}")
    times = np.asarray(times, dtype=float)
    if np.any(times <= 0):
        raise ValueError("scan times must be positive")
    rng = np.random.default_rng(seed)
    side = {"b_e": ops.b, "a_e": ops.a, "e_bstar": ops.b_star, "e_astar": ops.a_star}[which]
    sideT = side.T.tocsr()
    vals, flags = [], []
    x = None
    for t in times:
        E = ExpAction(ops, t, method, substep_tol, probe=rng.standard_normal(ops.n))
        if which in ("b_e", "a_e"):
            f, fT = (lambda u: side @ E(u)), (lambda w: E.T(sideT @ w))
        else:
            f, fT = (lambda u: E(side @ u)), (lambda w: sideT @ E.T(w))
        s, x, ok = power_norm(f, fT, ops.n, rng, iters, rtol, x0=x if warm_start else None)
        vals.append(s)
        flags.append(ok)
    return DecayCurve(times, np.array(vals), label=which, converged=np.array(flags))


def fit_slope(times, values):
    """Least-squares slope of log(values) against log(times)."""
    return float(np.polyfit(np.log(times), np.log(values), 1)[0])


@dataclass(frozen=True)
class LyapunovConstants:
    E: float
    D: float
    C: float
    eta: float
    eta_prime: float
    formula: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.E > 3 or self.E * self.eta_prime > 2 + 1e-15:
            raise ValueError("need E > 3 and E * eta_prime <= 2")


def decide_constants(ops=None, *, C_V=None, gamma=None):
    """One valid closed-form choice of (E, D, C) for t in (0, 1].

    Bounding the derivative of A term by term gives the sufficient conditions
    E >= 3 + eta, E eta' <= 2, D >= E/(2 eta') and
    2C >= D + E C_V + beta^2/(4 eta).  We take beta = 2D + 2E(1 + C_V) + gamma E,
    which majorizes every cross-term coefficient, and fix
    C = D + E C_V + beta^2 / (4 eta).  D = 2E keeps D > E^2/4, so A itself
    controls t |b u|^2 and t^3 |a u|^2.
    """
    if ops is not None:
        C_V = ops.C_V_hess if C_V is None else C_V
        gamma = ops.disc.gamma if gamma is None else gamma
    eta = 0.5
    E = 4.0
    eta_p = 2.0 / E
    D = max(2.0 * E, E / (2.0 * eta_p))
    beta = 2 * D + 2 * E * (1 + C_V) + gamma * E
    C = D + E * C_V + beta ** 2 / (4 * eta)
    formula = (f"eta=1/2 E=4 eta'=1/2 D=max(2E,E/(2eta'))={D:g} "
               f"beta=2D+2E(1+C_V)+gamma*E={beta:.12g} C=D+E*C_V+beta^2/(4eta)={C:.12g}")
    return LyapunovConstants(E=E, D=D, C=C, eta=eta, eta_prime=eta_p, formula=formula)


def lyapunov_sufficient(consts, C_V, gamma):
    """Check the sufficient inequalities behind decide_constants."""
    c = consts
    beta_min = 2 * c.D + 2 * c.E + c.E * gamma + 2 * C_V
    return {
        "E>=3+eta": c.E >= 3 + c.eta,
        "E*eta'<=2": c.E * c.eta_prime <= 2,
        "D>=E/(2eta')": c.D >= c.E / (2 * c.eta_prime),
        "2C>=D+E*C_V+beta^2/(4eta)": 2 * c.C >= c.D + c.E * C_V + beta_min ** 2 / (4 * c.eta),
    }


def lyapunov_value(ops, u, t, consts):
    au, bu = ops.a @ u, ops.b @ u
    return (t ** 3 * ops.inner(au, au) + consts.E * t ** 2 * ops.inner(au, bu)
            + consts.D * t * ops.inner(bu, bu) + consts.C * ops.inner(u, u))


@dataclass(frozen=True)
class LyapunovTrack:
    curve: DecayCurve
    max_increment: float
    relative_increment: float
    b_norm: np.ndarray
    b_bound: np.ndarray
    a_norm: np.ndarray
    a_bound: np.ndarray


def smoothing_bounds(consts, t, u0_norm):
    """|b u(t)| and |a u(t)| bounds implied by A(t) <= A(0) = C |u0|^2."""
    c = consts
    kb = c.D - c.E ** 2 / 4.0
    ka = 1.0 - c.E ** 2 / (4.0 * c.D)
    if kb <= 0 or ka <= 0:
        raise ValueError("need D > E^2/4 for the smoothing bounds")
    t = np.asarray(t, dtype=float)
    return (math.sqrt(c.C / kb) * t ** -0.5 * u0_norm, math.sqrt(c.C / ka) * t ** -1.5 * u0_norm)


def lyapunov_track(ops, u0, consts, times, method="dense_expm", substep_tol=1e-10):
    """A(t) along e^{-tK} u0 on a uniform grid in (0, 1], with A(0) prepended."""
    times = np.asarray(times, dtype=float)
    dt = times[0]
    if np.any(times <= 0) or times[-1] > 1 + 1e-12 or not np.allclose(np.diff(times), dt, rtol=1e-9):
        raise ValueError("times must be the uniform grid dt, 2dt, ..., <= 1")
    p = EvolveParams(method, dt, times[-1], substep_tol)
    ts, traj = evolve(ops, u0, p)
    A = np.array([lyapunov_value(ops, u, t, consts) for t, u in zip(ts, traj)])
    inc = np.diff(A)
    max_inc = float(max(0.0, inc.max()))
    b_norm = np.array([ops.norm(ops.b @ u) for u in traj[1:]])
    a_norm = np.array([ops.norm(ops.a @ u) for u in traj[1:]])
    b_bound, a_bound = smoothing_bounds(consts, ts[1:], ops.norm(u0))
    return LyapunovTrack(curve=DecayCurve(ts, A, "A"), max_increment=max_inc,
                         relative_increment=max_inc / A[0], b_norm=b_norm, b_bound=b_bound,
                         a_norm=a_norm, a_bound=a_bound)
