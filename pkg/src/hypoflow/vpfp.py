"""Mollified Vlasov-Poisson-Fokker-Planck: Picard scheme, self-consistent time marching, entropy."""
from dataclasses import dataclass, field
import math

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from . import _kernels
from .emden import convolve, equilibrium, make_mollifier, solve_emden
from .hypocoercivity import hypo_report, null_ground, smoothing_constant
from .semigroup import _propagator


class BlowUpError(RuntimeError):
    pass


class PicardError(RuntimeError):
    pass


class InterpolationError(ValueError):
    pass


# ---------------------------------------------------------------- interaction kernel

@dataclass(frozen=True)
class InteractionKernel:
    """phi = -zeta * sign/2 at the 2n-1 lattice offsets."""
    phi: np.ndarray
    h: float

    @property
    def norm_inf(self):
        return float(np.max(np.abs(self.phi)))


def make_kernel(mol):
    # phi_k = -h sum_l zeta_l sign(k - l)/2, sums taken over the same lattice
    z = mol.kvals
    h = mol.h
    below = np.concatenate([[0.0], np.cumsum(z)[:-1]])
    above = z.sum() - below - z
    phi = -0.5 * h * (below - above)
    return InteractionKernel(phi=phi, h=h)


def scaled_kernel(kernel, factor):
    return InteractionKernel(phi=factor * kernel.phi, h=kernel.h)


def field_from_density(rho, kernel, kappa):
    if kappa == 0.0:
        return np.zeros_like(np.asarray(rho, dtype=float))
    return kappa * convolve(kernel.phi, rho, kernel.h)


# ---------------------------------------------------------------- frame

@dataclass(frozen=True)
class Frame:
    """Discrete equilibrium 1/2-power: x-profile ``s`` times the Hermite ground."""
    s: np.ndarray
    state: np.ndarray
    h: float
    n_v: int

    def coeffs(self, u):
        return np.asarray(u).reshape(self.s.size, self.n_v)

    def rho(self, u):
        """Velocity integral of f = M^{1/2} u at each node (only Hermite mode 0 survives)."""
        return self.s * self.coeffs(u)[:, 0]

    def mass(self, u):
        return self.h * float(np.sum(self.rho(u)))

    def norm(self, u):
        return math.sqrt(self.h) * float(np.linalg.norm(u))


def make_frame(ops, kind="null"):
    """``null``: null vector of the discrete Lambda^2; ``sampled``: sampled e^{-V/2}."""
    st = null_ground(ops) if kind == "null" else ops.ground.copy()
    s = st.reshape(ops.disc.n_x, ops.disc.n_v)[:, 0].copy()
    return Frame(s=s, state=st, h=ops.h, n_v=ops.disc.n_v)


def rho_by_quadrature(u, frame):
    """Same as ``frame.rho`` via Gauss-Hermite collocation of the velocity integral."""
    nq = max(frame.n_v + 1, 8)
    v, w = hermegauss(nq)
    w = w / math.sqrt(2 * math.pi)
    H = _kernels.hermite_table(v, frame.n_v)
    p = frame.coeffs(u) @ H
    return frame.s * (p @ w)


def initial_state(frame, beta=0.5, v0=1.0):
    """Tilted profile s e^{beta x} times a Maxwellian shifted by v0, unit mass."""
    n_x = frame.s.size
    L = frame.h * (n_x + 1) / 2
    x = -L + frame.h * np.arange(1, n_x + 1)
    m = np.arange(frame.n_v)
    # f/M = exp(v v0 - v0^2/2) = sum_m v0^m He_m(v)/m!
    c = np.array([v0 ** k / math.sqrt(math.factorial(k)) for k in m])
    u = np.kron(frame.s * np.exp(beta * x), c)
    return u / frame.mass(u)


# ---------------------------------------------------------------- field step and linear solve

def field_step(u, E, dt, frame_shape, gamma):
    # exact exponential of -dt gamma^{-1/2} diag(E) x b*, node by node
    c = np.asarray(u).reshape(frame_shape)
    return _kernels.field_exp(c, dt * np.asarray(E) / math.sqrt(gamma), gamma).ravel()


class _FieldSamples:
    def __init__(self, E_of_t, dt):
        self.dt = dt
        if callable(E_of_t):
            self.fn = E_of_t
        else:
            ts, vals = E_of_t
            self.ts = np.asarray(ts, dtype=float)
            self.vals = np.asarray(vals, dtype=float)
            self.fn = self._interp

    def _interp(self, t):
        ts = self.ts
        j = int(np.searchsorted(ts, t))
        if j < ts.size and abs(ts[j] - t) <= 1e-12 * max(1.0, abs(t)):
            return self.vals[j]
        if j == 0 or j == ts.size:
            gap = ts[0] - t if j == 0 else t - ts[-1]
            if gap > self.dt:
                raise InterpolationError(f"no field sample within dt of t={t:.6g}")
            return self.vals[0] if j == 0 else self.vals[-1]
        if ts[j] - ts[j - 1] > self.dt * (1 + 1e-9):
            raise InterpolationError(f"field sample gap {ts[j] - ts[j - 1]:.3g} > dt around t={t:.6g}")
        w = (t - ts[j - 1]) / (ts[j] - ts[j - 1])
        return (1 - w) * self.vals[j - 1] + w * self.vals[j]

    def __call__(self, t):
        return self.fn(t)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    step_growth: np.ndarray
    mid_rho: np.ndarray = None


def linear_mild_solve(ops, E_of_t, u0, t_end, dt, frame=None, record_mid=False):
    """Strang splitting for du/dt + K u = -gamma^{-1/2} diag(E(t)) x b* u.

    Half Crank-Nicolson step, exact field exponential with E at the step
    midpoint, half Crank-Nicolson step. ``E_of_t`` is a callable of t or a
    pair (sample times, samples).
    """
    n = int(round(t_end / dt))
    if n < 1 or abs(n * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must be a positive multiple of dt")
    cn = _propagator(ops)
    g = ops.disc.gamma
    shape = (ops.disc.n_x, ops.disc.n_v)
    E = _FieldSamples(E_of_t, dt)
    out = np.empty((n + 1, ops.n))
    growth = np.empty(n)
    mids = np.empty((n, ops.disc.n_x)) if record_mid else None
    u = np.asarray(u0, dtype=float).copy()
    out[0] = u
    for k in range(n):
        nu = np.linalg.norm(u)
        w = cn.step(u, 0.5 * dt)
        if record_mid:
            mids[k] = frame.rho(w)
        Ek = E((k + 0.5) * dt)
        if np.any(Ek):
            w = field_step(w, Ek, dt, shape, g)
        u = cn.step(w, 0.5 * dt)
        growth[k] = np.linalg.norm(u) / nu if nu > 0 else 1.0
        out[k + 1] = u
    return Trajectory(np.arange(n + 1) * dt, out, growth, mids)


# ---------------------------------------------------------------- self-consistent runs

@dataclass
class VpfpRun:
    times: np.ndarray
    states: np.ndarray
    decay: np.ndarray
    envelope: np.ndarray
    entropy: np.ndarray
    entropy_envelope: np.ndarray
    psi: np.ndarray
    mass: np.ndarray
    clamped_mass: np.ndarray
    field_sup: np.ndarray
    field_bound: np.ndarray
    constants: dict
    picard_log: list = field(default_factory=list)

    def rows(self):
        return np.column_stack([self.times, self.decay, self.envelope, self.entropy, self.entropy_envelope,
                                self.psi, self.mass, self.clamped_mass])


CSV_COLUMNS = ("t", "decay", "envelope", "entropy", "entropy_envelope", "psi", "mass", "clamped_mass")


class _Monitor:
    def __init__(self, frame, u0, rate, E_inf, kernel, kappa, n_q):
        self.frame = frame
        self.rate = rate
        self.g0 = frame.norm(u0 - frame.state)
        self.f0 = frame.norm(u0)
        self.E_inf = E_inf
        self.kernel = kernel
        self.kappa = kappa
        self.n_q = n_q
        self.rec = {k: [] for k in ("t", "u", "decay", "H", "clamp", "mass", "Esup", "Ebound")}

    def record(self, t, u, Ediff=None):
        fr = self.frame
        r = self.rec
        gn = fr.norm(u - fr.state)
        H, cl = entropy(u, fr, self.n_q)
        r["t"].append(t)
        r["u"].append(u.copy())
        r["decay"].append(gn)
        r["H"].append(H)
        r["clamp"].append(cl)
        r["mass"].append(fr.mass(u))
        if Ediff is None:
            Ediff = field_from_density(fr.rho(u), self.kernel, self.kappa) - self.E_inf
        r["Esup"].append(float(np.max(np.abs(Ediff))))
        r["Ebound"].append(abs(self.kappa) * self.kernel.norm_inf * gn)

    def finish(self, constants, log=None):
        r = self.rec
        t = np.array(r["t"])
        decay = np.array(r["decay"])
        env = 6.0 * self.g0 * np.exp(-self.rate * t)
        return VpfpRun(times=t, states=np.array(r["u"]), decay=decay, envelope=env,
                       entropy=np.array(r["H"]), entropy_envelope=42.0 * self.f0 * self.g0 * np.exp(-self.rate * t),
                       psi=np.exp(self.rate * t) * decay, mass=np.array(r["mass"]),
                       clamped_mass=np.array(r["clamp"]), field_sup=np.array(r["Esup"]),
                       field_bound=np.array(r["Ebound"]), constants=constants, picard_log=log or [])


def _check_grid(T, dt, out_every):
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be a positive multiple of dt")
    if out_every < 1 or n % out_every:
        raise ValueError("number of steps must be a multiple of out_every")
    return n


def time_march(ops_inf, frame, kernel, kappa, u0, T, dt, E_inf=None, out_every=1, constants=None,
               n_q=None, blowup=10.0):
    """Self-consistent Strang steps: the field is refreshed from the half-stepped density."""
    n = _check_grid(T, dt, out_every)
    cn = _propagator(ops_inf)
    g = ops_inf.disc.gamma
    shape = (ops_inf.disc.n_x, ops_inf.disc.n_v)
    E_inf = np.zeros(shape[0]) if E_inf is None else np.asarray(E_inf, dtype=float)
    constants = dict(constants or {})
    rate = constants.get("alpha_inf", 0.0) / constants["A_inf"] if "A_inf" in constants else 0.0
    mon = _Monitor(frame, u0, rate, E_inf, kernel, kappa, n_q)
    u = np.asarray(u0, dtype=float).copy()
    cap = blowup * frame.norm(u)
    mon.record(0.0, u)
    for k in range(n):
        w = cn.step(u, 0.5 * dt)
        Ed = field_from_density(frame.rho(w), kernel, kappa) - E_inf
        if kappa != 0.0:
            w = field_step(w, Ed, dt, shape, g)
        u = cn.step(w, 0.5 * dt)
        if frame.norm(u) > cap:
            raise BlowUpError(f"norm exceeded {blowup} x initial at t={(k + 1) * dt:.6g}")
        if (k + 1) % out_every == 0:
            mon.record((k + 1) * dt, u)
    return mon.finish(constants)


def default_window(C_T):
    return min(0.25, (2.0 * C_T) ** -2) if C_T > 0 else 0.25


def picard_solve(ops_inf, frame, kernel, kappa, u0, T, dt, window=0.25, picard_tol=1e-10, E_inf=None,
                 out_every=1, constants=None, n_q=None, max_iter=50, min_window=None):
    """Windowed Picard iteration: freeze the field from iterate n, solve the linear problem for n+1.

    The field of each iterate is taken at the step midpoints, so the fixed
    point coincides with ``time_march`` on the same grid.
    """
    n_total = _check_grid(T, dt, out_every)
    E_inf = np.zeros(ops_inf.disc.n_x) if E_inf is None else np.asarray(E_inf, dtype=float)
    min_window = dt if min_window is None else min_window
    constants = dict(constants or {})
    rate = constants.get("alpha_inf", 0.0) / constants["A_inf"] if "A_inf" in constants else 0.0
    mon = _Monitor(frame, u0, rate, E_inf, kernel, kappa, n_q)
    u = np.asarray(u0, dtype=float).copy()
    mon.record(0.0, u)
    log = []
    k0 = 0
    steps_w = max(1, int(round(window / dt)))
    while k0 < n_total:
        nw = min(steps_w, n_total - k0)
        t0 = k0 * dt
        ts = t0 + (np.arange(nw) + 0.5) * dt
        rho_mid = np.repeat(frame.rho(u)[None, :], nw, axis=0)
        prev = np.repeat(u[None, :], nw + 1, axis=0)
        diffs = []
        ok = False
        for _ in range(max_iter):
            Ed = np.array([field_from_density(r, kernel, kappa) for r in rho_mid]) - E_inf
            tr = linear_mild_solve(ops_inf, (ts - t0, Ed), u, nw * dt, dt, frame=frame, record_mid=True)
            d = max(frame.norm(a - b) for a, b in zip(tr.states, prev))
            diffs.append(d)
            prev, rho_mid = tr.states, tr.mid_rho
            if d <= picard_tol:
                ok = True
                break
        if not ok:
            if nw * dt / 2 < min_window:
                raise PicardError(f"no contraction at t={t0:.6g} even for the minimum window")
            steps_w = max(1, nw // 2)
            log.append({"t0": t0, "window": nw * dt, "halved": True, "diffs": diffs})
            continue
        ratios = [b / a for a, b in zip(diffs[:-1], diffs[1:]) if a > 0]
        log.append({"t0": t0, "window": nw * dt, "iterations": len(diffs) - 1, "diffs": diffs,
                    "max_ratio": max(ratios) if ratios else 0.0})
        for j in range(1, nw + 1):
            if (k0 + j) % out_every == 0:
                mon.record((k0 + j) * dt, prev[j])
        u = prev[-1]
        k0 += nw
    return mon.finish(constants, log)


# ---------------------------------------------------------------- smallness threshold and entropy

def time_integral(alpha, A):
    """int_0^inf (1 + s^{-1/2}) e^{-alpha s/(2A)} ds."""
    lam = alpha / (2.0 * A)
    return 1.0 / lam + math.sqrt(math.pi / lam)


def smallness_threshold(report_inf, kernel, C2):
    """kappa_max = alpha/(2 C_inf) with C_inf = 3 |phi| gamma^{-1/2} C2 alpha I and I the time integral above.

    ``C2`` is the constant of the smoothing bound |e^{-tK} b*| <= C2 (1 + t^{-1/2}) e^{-alpha t/A}.
    """
    a, A, g = report_inf.alpha, report_inf.A_const, report_inf.gamma
    I = time_integral(a, A)
    C_inf = 3.0 * kernel.norm_inf * C2 * a * I / math.sqrt(g)
    kmax = a / (2.0 * C_inf)
    info = {"alpha_inf": a, "A_inf": A, "gamma": g, "phi_inf": kernel.norm_inf, "C2": C2, "time_integral": I,
            "C_inf": C_inf, "kappa_max": kmax,
            "formula": "C_inf=3*phi_inf*C2*alpha_inf*I/sqrt(gamma); I=2A/alpha+sqrt(2*pi*A/alpha); "
                       "kappa_max=alpha_inf/(2*C_inf)"}
    return kmax, info


def picard_constant(kernel, kappa, C2, u0_norm, gamma):
    """C'_T in the contraction factor C'_T sqrt(t) of one Picard window (t <= 1)."""
    return 3.0 * abs(kappa) * kernel.norm_inf * C2 * u0_norm / math.sqrt(gamma)


# ---------------------------------------------------------------- setup shared by the CLI and the checks

@dataclass
class Setup:
    pot: object
    disc: object
    mol: object
    kernel: InteractionKernel
    sol: object
    ops_inf: object
    frame: Frame
    report: object
    E_inf: np.ndarray

    @property
    def constants(self):
        return {"alpha_inf": self.report.alpha, "A_inf": self.report.A_const, "kappa": self.sol.kappa}


def prepare(pot, disc, kappa, sigma=0.5, emden_tol=1e-8, theta=0.5, kappa_limit=50.0):
    mol = make_mollifier(disc, sigma)
    kernel = make_kernel(mol)
    sol = solve_emden(pot, mol, kappa, disc, tol=emden_tol, theta=theta, kappa_max=kappa_limit)
    _, ops_inf = equilibrium(pot, sol, disc)
    report, _ = hypo_report(ops_inf)
    frame = make_frame(ops_inf)
    return Setup(pot, disc, mol, kernel, sol, ops_inf, frame, report, sol.dV_inf.copy())


def threshold(setup, times=None, substep_tol=1e-8, seed=0):
    C2, ts, vals, worst = smoothing_constant(setup.ops_inf, setup.report, times, substep_tol=substep_tol, seed=seed)
    kmax, info = smallness_threshold(setup.report, setup.kernel, C2)
    info["C2_worst_ratio"] = worst
    return kmax, info


def run(setup, kappa, u0, T, dt, method="march", window=0.0, picard_tol=1e-10, out_every=1, C2=None):
    if kappa != setup.sol.kappa:
        raise ValueError("setup was prepared for a different kappa")
    c = setup.constants
    if method == "march":
        return time_march(setup.ops_inf, setup.frame, setup.kernel, kappa, u0, T, dt, E_inf=setup.E_inf,
                          out_every=out_every, constants=c)
    if window <= 0:
        ct = picard_constant(setup.kernel, kappa, C2 or 0.0, setup.frame.norm(u0), setup.disc.gamma)
        window = default_window(ct)
    window = max(dt, dt * round(window / dt))
    return picard_solve(setup.ops_inf, setup.frame, setup.kernel, kappa, u0, T, dt, window=window,
                        picard_tol=picard_tol, E_inf=setup.E_inf, out_every=out_every, constants=c)


CLAMP_LIMIT = 1e-3


def entropy(u, frame, n_q=None):
    """Relative entropy of f = M^{1/2} u against M on the (x, Gauss-Hermite) collocation grid.

    Returns (H, clamped_mass); nodes where f <= 0 contribute nothing and their
    mass is reported.
    """
    nv = frame.n_v
    n_q = max(2 * nv, 40) if n_q is None else n_q
    v, w = hermegauss(n_q)
    w = w / math.sqrt(2 * math.pi)
    H = _kernels.hermite_table(v, nv)
    p = frame.coeffs(u) @ H
    s = frame.s[:, None]
    ok = (p > 0) & (s > 1e-300)
    ratio = np.where(ok, p / np.where(s > 1e-300, s, 1.0), 1.0)
    dens = s * p
    Hval = frame.h * float(np.sum(w[None, :] * np.where(ok, dens * np.log(ratio), 0.0)))
    clamped = frame.h * float(np.sum(w[None, :] * np.where((p < 0) & (s > 0), -dens, 0.0)))
    return Hval, clamped


def entropy_reliable(clamped):
    return clamped <= CLAMP_LIMIT
