"""Spectral gap, auxiliary operators and exponential-decay checks."""
from dataclasses import dataclass, field
import math

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, eigsh, splu, svds

from .semigroup import DENSE_MAX, DecayCurve, ExpAction, power_norm

GROUND_TOL = 1e-6


class DiscretizationError(RuntimeError):
    pass


# ---------------------------------------------------------------- spectral gap

def _smallest_eigs(M, k, gamma, dense):
    if dense:
        w, V = np.linalg.eigh(M.toarray())
        return w[:k], V[:, :k]
    w, V = eigsh(M.tocsc(), k=k, sigma=-0.05 * gamma, which="LM", tol=1e-13)
    order = np.argsort(w)
    return w[order], V[:, order]


def spectral_gap(ops, k=6, return_residual=False):
    """First nonzero eigenvalue of Lambda^2 and the flat-normalized ground vector."""
    g = ops.disc.gamma
    dense = ops.n <= DENSE_MAX
    w, V = _smallest_eigs(ops.Lambda2, min(k, ops.n - 1), g, dense)
    if not w[0] < GROUND_TOL * g:
        raise DiscretizationError(f"no eigenvalue of Lambda^2 below {GROUND_TOL}*gamma (smallest {w[0]:.3e})")
    distinct = np.flatnonzero(w > w[0] + GROUND_TOL * g)
    if distinct.size == 0:
        raise DiscretizationError("gap not resolved by the computed eigenvalues")
    j = distinct[0]
    alpha = float(w[j])
    ground = _orient(V[:, 0], ops.h)
    res = max(np.linalg.norm(ops.Lambda2 @ V[:, i] - w[i] * V[:, i]) / max(abs(w[i]), g) for i in (0, j))
    if res > 1e-8:
        raise DiscretizationError(f"eigen-residual {res:.2e} above 1e-8")
    return (alpha, ground, res) if return_residual else (alpha, ground)


def _orient(v, h):
    v = np.array(v, dtype=float)
    if v.sum() < 0:
        v = -v
    return v / (math.sqrt(h) * np.linalg.norm(v))


def witten_factor_gap(ops):
    """Gap of the one-dimensional position factor a_x^T a_x (dense oracle)."""
    AA = (ops.ax.T @ ops.ax).toarray()
    w = np.linalg.eigvalsh(0.5 * (AA + AA.T))
    return float(w[1]), float(w[0])


def null_ground(ops):
    """Numerical null vector of Lambda^2 built from the position factor (x its Hermite ground)."""
    AA = (ops.ax.T @ ops.ax).tocsc()
    AA = 0.5 * (AA + AA.T)
    n_x = ops.disc.n_x
    if n_x <= 2048:
        w, V = np.linalg.eigh(AA.toarray())
        phi = V[:, 0]
    else:
        w, V = eigsh(AA, k=1, sigma=-0.05 * ops.disc.gamma, which="LM", tol=1e-13)
        phi = V[:, 0]
    e0 = np.zeros(ops.disc.n_v)
    e0[0] = 1.0
    return _orient(np.kron(phi, e0), ops.h)


@dataclass(frozen=True)
class PerpProjector:
    ground: np.ndarray
    h: float

    def __call__(self, u):
        u = np.asarray(u)
        c = self.h * (self.ground @ u)
        return u - (np.multiply.outer(self.ground, c) if u.ndim > 1 else c * self.ground)

    def matrix(self):
        n = self.ground.size
        return np.eye(n) - self.h * np.outer(self.ground, self.ground)


def perp_projector(ops, deflation="null"):
    if deflation == "null":
        m = null_ground(ops)
    elif deflation == "sampled":
        m = ops.ground
    else:
        raise ValueError("deflation must be 'null' or 'sampled'")
    return PerpProjector(m, ops.h)


# ---------------------------------------------------------------- auxiliary operators

class _SymSolver:
    def __init__(self, M, dense):
        self.dense = dense
        if dense:
            self.cho = sla.cho_factor(M.toarray())
        else:
            self.lu = splu(M.tocsc())

    def __call__(self, r):
        return sla.cho_solve(self.cho, r) if self.dense else self.lu.solve(r)


@dataclass
class Auxiliary:
    """L = S a* b, Astar = [S a*, X0] and aLb = a S b* with S = (delta^2 + Lambda^2)^{-1}."""
    L: LinearOperator
    Astar: LinearOperator
    aLb: LinearOperator
    S: object
    delta: float
    dense: dict = field(default_factory=dict)


def build_auxiliary(ops, delta):
    if not delta > 0 or delta ** 2 > ops.disc.gamma:
        raise ValueError("need 0 < delta^2 <= gamma")
    n = ops.n
    dense = n <= DENSE_MAX
    S = _SymSolver(ops.Lambda2 + delta ** 2 * sp.identity(n, format="csr"), dense)
    a, at, b, bt, X0 = ops.a, ops.a_star, ops.b, ops.b_star, ops.X0

    L = LinearOperator((n, n), matvec=lambda u: S(at @ (b @ u)),
                       rmatvec=lambda w: bt @ (a @ S(w)), dtype=float)
    Ast = LinearOperator((n, n), matvec=lambda u: S(at @ (X0 @ u)) - X0 @ S(at @ u),
                         rmatvec=lambda w: -(X0 @ (a @ S(w))) + a @ S(X0 @ w), dtype=float)
    aLb = LinearOperator((n, n), matvec=lambda u: a @ S(bt @ u),
                         rmatvec=lambda w: b @ S(at @ w), dtype=float)
    aux = Auxiliary(L=L, Astar=Ast, aLb=aLb, S=S, delta=delta)
    if dense:
        Sm = sla.cho_solve(S.cho, np.eye(n))
        Sm = 0.5 * (Sm + Sm.T)
        Sat = Sm @ at.toarray()
        X0d = X0.toarray()
        aux.dense = {
            "Sinv": Sm,
            "L": Sat @ b.toarray(),
            "Astar": Sat @ X0d - X0d @ Sat,
            "aLb": a.toarray() @ Sm @ bt.toarray(),
        }
    return aux


def op_norm(op, dense_matrix=None, rng=None):
    if dense_matrix is not None:
        return float(np.linalg.norm(dense_matrix, 2))
    try:
        return float(svds(op, k=1, return_singular_vectors=False, tol=1e-10)[0])
    except Exception:  # pragma: no cover - fallback for ARPACK trouble
        return power_norm(op.matvec, op.rmatvec, op.shape[0], rng, iters=500, rtol=1e-10)[0]


@dataclass(frozen=True)
class HypoReport:
    alpha: float
    delta: float
    norm_L: float
    norm_Astar: float
    norm_aLb: float
    C_V_hat: float
    C_V_prime: float
    A_const: float
    gamma: float
    decay_prefactor: float = 3.0
    ground: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def rate(self):
        return self.alpha / self.A_const

    def bounds_ok(self):
        return {
            "alpha<=gamma": self.alpha <= self.gamma * (1 + 1e-12),
            "norm_aLb<=1": self.norm_aLb <= 1 + 1e-8,
            "norm_L<=sqrt(2gamma)/delta": self.norm_L <= math.sqrt(2 * self.gamma) / self.delta + 1e-8,
        }

    def as_dict(self):
        return {k: getattr(self, k) for k in ("alpha", "delta", "norm_L", "norm_Astar", "norm_aLb",
                                              "C_V_hat", "C_V_prime", "A_const", "rate", "decay_prefactor")}


def choose_delta(alpha, gamma):
    return min(math.sqrt(alpha), math.sqrt(gamma) * (1 - 1e-12))


def C_V_prime(C_V_hat, delta, gamma):
    """Absorption constant: 2 max(1, delta^2) + (C_V_hat + 1 + gamma)^2, at least delta sqrt(2 gamma)."""
    return max(2.0 * max(1.0, delta ** 2) + (C_V_hat + 1.0 + gamma) ** 2, delta * math.sqrt(2.0 * gamma))


def hypo_report(ops, deflation="null", rng=None):
    """Gap, measured auxiliary norms and the decay constants on one operator set."""
    g = ops.disc.gamma
    alpha, ground_l2 = spectral_gap(ops)
    ground = null_ground(ops) if deflation == "null" else ops.ground
    delta = choose_delta(alpha, g)
    aux = build_auxiliary(ops, delta)
    d = aux.dense
    nL = op_norm(aux.L, d.get("L"), rng)
    nA = op_norm(aux.Astar, d.get("Astar"), rng)
    naLb = op_norm(aux.aLb, d.get("aLb"), rng)
    chat = delta * nA
    cvp = C_V_prime(chat, delta, g)
    rep = HypoReport(alpha=alpha, delta=delta, norm_L=nL, norm_Astar=nA, norm_aLb=naLb,
                     C_V_hat=chat, C_V_prime=cvp, A_const=12.0 * cvp, gamma=g, ground=ground)
    return rep, aux


def decay_constants(report):
    return report.alpha, report.A_const


# ---------------------------------------------------------------- core inequality

def core_inequality_terms(ops, aux, u):
    """Left side |u|^2 and the right side of the crossed-commutator estimate."""
    g = ops.disc.gamma
    delta = aux.delta
    ip = ops.inner
    Ku, bu = ops.K @ u, ops.b @ u
    Lu = aux.L.matvec(u)
    LTu = aux.L.rmatvec(u)
    rhs = (ip(Ku, Lu + LTu) - 2.0 * ip(ops.b_star @ bu, Lu) - ip(aux.Astar.matvec(bu), u)
           + (1.0 + g) / delta * ops.norm(bu) * ops.norm(u) + delta ** 2 * ip(aux.S(u), u))
    return ip(u, u), rhs


def verify_core_inequality(ops, report, aux, trials=200, seed=0):
    """Minimum relative margin of the core inequality over random perp probes.

    Also reports the largest ratio delta^2 (S u, u) / |u|^2 on the same probes,
    which the projected spectral step needs to stay below 1/2.
    """
    rng = np.random.default_rng(seed)
    P = PerpProjector(report.ground, ops.h)
    margins, perp_ratio = [], []
    for _ in range(trials):
        u = P(rng.standard_normal(ops.n))
        lhs, rhs = core_inequality_terms(ops, aux, u)
        margins.append((rhs - lhs) / lhs)
        perp_ratio.append(aux.delta ** 2 * ops.inner(aux.S(u), u) / lhs)
    margins = np.array(margins)
    k = int(np.argmin(margins))
    return {"min_margin": float(margins[k]), "mean_margin": float(margins.mean()),
            "max_perp_ratio": float(max(perp_ratio)), "trials": trials,
            "ok": bool(margins[k] >= -1e-6 and max(perp_ratio) <= 0.5 + 1e-12)}


# ---------------------------------------------------------------- abstract lemma

@dataclass
class LemmaResult:
    passed: bool
    hypothesis_margin: float
    witness: np.ndarray
    times: np.ndarray
    values: np.ndarray
    bound: np.ndarray
    measured_rate: float = float("nan")


def hypothesis_form(K, L):
    """Symmetric matrix Q with phi^T Q phi = Re(K phi, phi) + Re(K phi, (L + L^T) phi)."""
    Ls = L + L.T
    Q = 0.5 * (K + K.T) + 0.5 * (K.T @ Ls + Ls @ K)
    return 0.5 * (Q + Q.T)


def abstract_lemma_check(K, L, alpha, C, times=None, probes=200, seed=0, n_phi=20):
    """Check the hypothesis on random probes, then the decay bound 3 e^{-alpha t/(3C)}."""
    K, L = np.asarray(K, dtype=float), np.asarray(L, dtype=float)
    n = K.shape[0]
    if np.linalg.eigvalsh(0.5 * (K + K.T))[0] < -1e-12 * max(1.0, np.abs(K).max()):
        raise ValueError("K is not accretive")
    if C < 1 or np.linalg.norm(L, 2) > C * (1 + 1e-12):
        raise ValueError("need C >= max(1, |L|)")
    rng = np.random.default_rng(seed)
    Q = hypothesis_form(K, L)
    phis = rng.standard_normal((probes, n))
    quad = np.einsum("ij,jk,ik->i", phis, Q, phis)
    marg = (quad - alpha * np.einsum("ij,ij->i", phis, phis)) / np.einsum("ij,ij->i", phis, phis)
    k = int(np.argmin(marg))
    times = np.linspace(0.0, 10.0, 101) if times is None else np.asarray(times, dtype=float)
    bound = 3.0 * np.exp(-alpha * times / (3.0 * C))
    if marg[k] < -1e-8:
        return LemmaResult(False, float(marg[k]), phis[k], times, np.full(times.shape, np.nan), bound)
    phi0 = rng.standard_normal((n_phi, n))
    phi0 /= np.linalg.norm(phi0, axis=1, keepdims=True)
    vals = np.empty(times.size)
    opn = np.empty(times.size)
    steps = np.diff(times)
    uniform = times[0] == 0.0 and steps.size and np.allclose(steps, steps[0], rtol=1e-12, atol=0)
    E1 = sla.expm(-steps[0] * K) if uniform else None
    E = np.eye(n)
    for i, t in enumerate(times):
        if uniform:
            E = E if i == 0 else E1 @ E
        else:
            E = sla.expm(-t * K)
        vals[i] = np.linalg.norm(phi0 @ E.T, axis=1).max()
        opn[i] = np.linalg.norm(E, 2)
    passed = bool(np.all(vals <= bound * (1 + 1e-10)) and np.all(opn <= bound * (1 + 1e-10)))
    late = times >= times[-1] / 2
    rate = -np.polyfit(times[late], np.log(opn[late]), 1)[0] if np.all(opn[late] > 0) else float("nan")
    return LemmaResult(passed, float(marg[k]), phis[k], times, opn, bound, float(rate))


def bisect_alpha(Q, hi=None, iters=80):
    """Largest alpha with Q - alpha I positive semidefinite, by bisection on Cholesky success."""
    def psd(a):
        try:
            np.linalg.cholesky(Q - a * np.eye(Q.shape[0]) + 1e-14 * np.eye(Q.shape[0]))
            return True
        except np.linalg.LinAlgError:
            return False
    lo = 0.0
    if not psd(lo):
        return None
    hi = float(np.abs(Q).sum(axis=1).max()) if hi is None else hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if psd(mid) else (lo, mid)
    return lo


def selfadjoint_example(n=8, seed=0):
    """Symmetric positive K with L = 0; alpha is its smallest eigenvalue and the decay is e^{-alpha t}."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.sort(rng.uniform(0.2, 2.0, n))
    K = (Q * lam) @ Q.T
    return 0.5 * (K + K.T), np.zeros((n, n)), float(lam[0]), 1.0


def nonnormal_example(n=8, seed=0, eps=0.1):
    """Random accretive nonnormal K with a small symmetric L and its bisected alpha."""
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    S = G @ G.T / (2 * n) + 0.02 * np.eye(n)
    R = rng.standard_normal((n, n))
    K = S + 1.5 * (R - R.T)
    M = rng.standard_normal((n, n))
    M = 0.5 * (M + M.T)
    M /= np.linalg.norm(M, 2)
    for _ in range(40):
        L = eps * M
        alpha = bisect_alpha(hypothesis_form(K, L))
        if alpha is not None and alpha > 0:
            return K, L, alpha, max(1.0, float(np.linalg.norm(L, 2)))
        eps *= 0.5
    raise RuntimeError("could not construct a positive hypothesis constant")


def fokker_planck_lemma_check(ops, report, times=None, probes=200, seed=0):
    """Abstract lemma on the assembled K restricted to the perp space.

    Uses L~ = delta^2 L / C'_V, C = 1 and alpha_abs = alpha / (4 C'_V); the
    conclusion is then exactly the 3 e^{-alpha t / A} envelope.
    """
    if ops.n > DENSE_MAX:
        raise ValueError("dense pipeline check limited to small sizes")
    aux = build_auxiliary(ops, report.delta)
    m = report.ground * math.sqrt(ops.h)
    Qb = sla.null_space(m[None, :])
    Kp = Qb.T @ ops.K.toarray() @ Qb
    Lt = report.delta ** 2 / report.C_V_prime * (Qb.T @ aux.dense["L"] @ Qb)
    C = max(1.0, float(np.linalg.norm(Lt, 2)))
    alpha_abs = report.alpha / (4.0 * report.C_V_prime)
    times = np.linspace(0.0, 10.0, 21) if times is None else times
    return abstract_lemma_check(Kp, Lt, alpha_abs, C, times=times, probes=probes, seed=seed, n_phi=5)


# ---------------------------------------------------------------- long-time scan

@dataclass
class LongtimeResult:
    perp: DecayCurve
    envelope: np.ndarray
    b: DecayCurve
    b_envelope: np.ndarray
    a: DecayCurve
    a_envelope: np.ndarray
    C_b: float
    C_a: float
    prefactor: float
    fitted_rate: float
    violations: list

    @property
    def ok(self):
        return not self.violations


def _dense_norm(apply, apply_T, n):
    op = LinearOperator((n, n), matvec=apply, rmatvec=apply_T, dtype=float)
    return float(svds(op, k=1, return_singular_vectors=False, tol=1e-10)[0])


def _norms_at(ops, P, t, method, substep_tol, rng, x0s, kinds=("perp", "b", "a")):
    E = ExpAction(ops, t, method, substep_tol, probe=rng.standard_normal(ops.n))
    bs, as_ = ops.b_star, ops.a_star
    maps = {
        "perp": (lambda u: P(E(P(u))), lambda w: P(E.T(P(w)))),
        "b": (lambda u: P(E(P(bs @ u))), lambda w: bs.T @ P(E.T(P(w)))),
        "a": (lambda u: P(E(P(as_ @ u))), lambda w: as_.T @ P(E.T(P(w)))),
    }
    out = {}
    for k in kinds:
        f, fT = maps[k]
        if method == "dense_expm":
            out[k] = _dense_norm(f, fT, ops.n)
        else:
            out[k], x0s[k], _ = power_norm(f, fT, ops.n, rng, iters=60, rtol=1e-8, x0=x0s.get(k))
    return out


def _envelope_constant(times, vals, rate, power):
    short = times <= 1.0
    i1 = int(np.flatnonzero(times == 1.0)[0])
    return math.exp(rate) * max(np.max(vals[short] / (1 + times[short] ** -power)), 3 * vals[i1])


def smoothing_constant(ops, report, times=None, method=None, substep_tol=1e-8, seed=0):
    """Constant C with |P e^{-tK} P b*| <= C (1 + t^{-1/2}) e^{-alpha t/A}, fixed from t <= 1.

    Returns (C, times, values, worst ratio of value to envelope over all times).
    """
    times = np.geomspace(1e-2, 10.0, 13) if times is None else np.asarray(times, dtype=float)
    grid = np.union1d(times, [1.0])
    method = method or ("dense_expm" if ops.n <= DENSE_MAX else "crank_nicolson")
    rng = np.random.default_rng(seed)
    P = PerpProjector(report.ground, ops.h)
    x0s = {}
    vals = np.array([_norms_at(ops, P, t, method, substep_tol, rng, x0s, kinds=("b",))["b"] for t in grid])
    C = _envelope_constant(grid, vals, report.rate, 0.5)
    env = C * (1 + grid ** -0.5) * np.exp(-report.rate * grid)
    return C, grid, vals, float(np.max(vals / env))


def longtime_scan(ops, report, times, method=None, substep_tol=1e-8, seed=0):
    """Perp semigroup norm and the b*, a* smoothing norms against their envelopes.

    The constants of the smoothing envelopes C (1 + t^{-1/2}) e^{-alpha t/A} and
    C (1 + t^{-3/2}) e^{-alpha t/A} are fixed from the data at t <= 1 and from
    the norm at t = 1 propagated by the perp envelope; points with t > 1 are then
    genuine checks.
    """
    times = np.asarray(times, dtype=float)
    method = method or ("dense_expm" if ops.n <= DENSE_MAX else "crank_nicolson")
    rng = np.random.default_rng(seed)
    P = PerpProjector(report.ground, ops.h)
    x0s = {}
    grid = np.union1d(times, [1.0])
    vals = {k: [] for k in ("perp", "b", "a")}
    for t in grid:
        r = _norms_at(ops, P, t, method, substep_tol, rng, x0s)
        for k in vals:
            vals[k].append(r[k])
    vals = {k: np.array(v) for k, v in vals.items()}
    sel = np.isin(grid, times)
    rate = report.rate
    env = 3.0 * np.exp(-rate * times)
    Cb = _envelope_constant(grid, vals["b"], rate, 0.5)
    Ca = _envelope_constant(grid, vals["a"], rate, 1.5)
    b_env = Cb * (1 + times ** -0.5) * np.exp(-rate * times)
    a_env = Ca * (1 + times ** -1.5) * np.exp(-rate * times)
    perp, bv, av = vals["perp"][sel], vals["b"][sel], vals["a"][sel]
    viol = []
    for name, v, e in (("perp", perp, env), ("b", bv, b_env), ("a", av, a_env)):
        for t, x, y in zip(times, v, e):
            if x > y * (1 + 1e-10):
                viol.append((name, float(t), float(x), float(y)))
    prefactor = float(np.max(perp * np.exp(rate * times)))
    tail = times >= times[-1] / 2
    fitted = float(-np.polyfit(times[tail], np.log(perp[tail]), 1)[0]) if tail.sum() >= 2 else float("nan")
    return LongtimeResult(DecayCurve(times, perp, "perp"), env, DecayCurve(times, bv, "e_bstar"), b_env,
                          DecayCurve(times, av, "e_astar"), a_env, float(Cb), float(Ca), prefactor,
                          fitted, viol)


def slowest_rate(ops, floor=None):
    """Smallest nonzero real part in the spectrum of K (dense oracle)."""
    if ops.n > DENSE_MAX:
        raise ValueError("dense eigensolve limited to small sizes")
    floor = 1e-4 * ops.disc.gamma if floor is None else floor
    lam = np.linalg.eigvals(ops.K.toarray())
    re = np.sort(lam.real)
    return float(re[re > floor][0])
