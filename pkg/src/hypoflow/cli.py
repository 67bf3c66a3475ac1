"""Command line entry point: ``hypoflow <subcommand> --config <file> [--out <csv>]``."""
import argparse
import platform
import sys
import time

import numpy as np

from . import __version__
from .config import ConfigError, help_text, manifest_text, parse_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SUBCOMMANDS = ("assemble", "shorttime", "lyapunov", "gap", "decay", "emden", "vpfp", "threshold")


class UsageError(Exception):
    pass


def fmt(x):
    return f"{x:.12g}"


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(float(v)) for v in row) + "\n")


def _versions():
    import numba
    import scipy
    from . import _kernels
    return {"hypoflow": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "numba_kernels": _kernels.USE_NUMBA}


def write_manifest(out, cfg, meta):
    with open(out + ".manifest", "w", encoding="utf-8") as fh:
        fh.write(manifest_text(cfg, meta))


# ---------------------------------------------------------------- builders

def potential_from(cfg):
    from .operators import build_potential
    kind = cfg["potential.kind"]
    c = cfg.coeffs()
    if kind in ("quadratic", "harmonic"):
        params = {"omega": cfg["potential.omega"]}
    elif kind == "quartic_double_well":
        if c and len(c) != 2:
            raise ConfigError("potential.coeffs: the double well takes 'a,b'")
        params = dict(zip(("a", "b"), c)) if c else {}
    else:
        params = {"coeffs": c}
    try:
        return build_potential(kind, params, x_max=cfg["disc.xmax"])
    except ValueError as exc:
        raise ConfigError(f"potential: {exc}") from None


def disc_from(cfg):
    from .operators import Discretization
    return Discretization(n_x=cfg["disc.nx"], n_v=cfg["disc.nv"], x_max=cfg["disc.xmax"], gamma=cfg["disc.gamma"])


def ops_from(cfg, args):
    from .operators import assemble, dump_operators
    try:
        ops = assemble(disc_from(cfg), potential_from(cfg))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.dump_operators:
        dump_operators(ops, args.dump_operators)
    return ops


def log_times(a, b, n):
    return np.geomspace(a, b, n)


def say(**kw):
    for k, v in kw.items():
        print(f"{k}={fmt(v) if isinstance(v, float) else v}")


# ---------------------------------------------------------------- subcommands

def cmd_assemble(cfg, args):
    from .operators import check_commutators
    ops = ops_from(cfg, args)
    rep = check_commutators(ops)
    say(n=ops.n, nnz_K=int(ops.K.nnz))
    say(**{k: float(v) for k, v in rep.items()})
    if args.out:
        write_csv(args.out, ("index", "value"), [(i, float(v)) for i, v in enumerate(rep.values())])
    ok = (rep["bX0_minus_a"] <= 1e-10 * max(1.0, rep["a_norm"]) and rep["X0_antisym"] == 0
          and rep["symK_defect"] == 0 and 3.5 <= rep["refinement_ratio"] <= 4.5)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_shorttime(cfg, args):
    from .semigroup import fit_slope, opnorm_scan
    ops = ops_from(cfg, args)
    ts = log_times(cfg["scan.tmin"], cfg["scan.tmax"], cfg["scan.points"])
    which = {"b": "b_e", "a": "a_e"}[args.which]
    curve = opnorm_scan(ops, which, ts, method=cfg["evolve.method"], substep_tol=cfg["tol.substep"],
                        seed=cfg["seed"], iters=cfg["scan.iters"], rtol=cfg["tol.power"])
    slope = fit_slope(ts, curve.values)
    say(which=args.which, fit_slope=slope, power_iteration_converged=int(np.all(curve.converged)))
    if args.out:
        write_csv(args.out, ("t", "value", "fit_slope"), [(t, v, slope) for t, v in zip(ts, curve.values)])
    target = -0.5 if args.which == "b" else -1.5
    return EXIT_OK if abs(slope - target) <= 0.1 else EXIT_FAIL


def cmd_lyapunov(cfg, args):
    from .semigroup import decide_constants, lyapunov_track
    ops = ops_from(cfg, args)
    consts = decide_constants(ops)
    n = cfg["lyapunov.points"] - 1
    ts = cfg["lyapunov.tmax"] / n * np.arange(1, n + 1)
    if ts[-1] > 1 + 1e-12:
        raise ConfigError("lyapunov.tmax must be at most 1")
    u0 = np.random.default_rng(cfg["seed"]).standard_normal(ops.n)
    method = "dense_expm" if ops.n <= 2500 else "crank_nicolson"
    tr = lyapunov_track(ops, u0, consts, ts, method=method, substep_tol=cfg["tol.substep"])
    A = tr.curve.values
    dA = np.concatenate([[0.0], np.diff(A)])
    say(E=consts.E, D=consts.D, C=consts.C, relative_increment=tr.relative_increment)
    if args.out:
        write_csv(args.out, ("t", "A", "dA"), zip(tr.curve.times, A, dA))
    return EXIT_OK if tr.relative_increment <= 1e-8 else EXIT_FAIL


def cmd_gap(cfg, args):
    from .hypocoercivity import hypo_report
    ops = ops_from(cfg, args)
    rep, _ = hypo_report(ops, rng=np.random.default_rng(cfg["seed"]))
    say(**rep.as_dict())
    ok = all(rep.bounds_ok().values())
    if args.out:
        d = rep.as_dict()
        write_csv(args.out, tuple(d), [tuple(d.values())])
    return EXIT_OK if ok else EXIT_FAIL


def cmd_decay(cfg, args):
    from .hypocoercivity import hypo_report, longtime_scan
    ops = ops_from(cfg, args)
    rep, _ = hypo_report(ops, rng=np.random.default_rng(cfg["seed"]))
    ts = log_times(cfg["decay.tmin"], cfg["decay.tmax"], cfg["decay.points"])
    res = longtime_scan(ops, rep, ts, substep_tol=cfg["tol.substep"], seed=cfg["seed"])
    say(alpha=rep.alpha, A_const=rep.A_const, prefactor=res.prefactor, fitted_rate=res.fitted_rate,
        C_b=res.C_b, C_a=res.C_a, violations=len(res.violations))
    if args.out:
        write_csv(args.out, ("t", "perp_norm", "envelope", "b_norm", "b_envelope", "a_norm", "a_envelope"),
                  zip(ts, res.perp.values, res.envelope, res.b.values, res.b_envelope, res.a.values, res.a_envelope))
    return EXIT_OK if res.ok else EXIT_FAIL


def cmd_emden(cfg, args):
    from .emden import make_mollifier, solve_emden
    pot, disc = potential_from(cfg), disc_from(cfg)
    mol = make_mollifier(disc, cfg["mollifier.sigma"])
    try:
        sol = solve_emden(pot, mol, args.kappa, disc, tol=cfg["emden.tol"], theta=cfg["emden.theta"],
                          kappa_max=cfg["emden.kappa_max"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    say(kappa=sol.kappa, iterations=sol.iterations, residual=sol.residual)
    if args.out:
        V = pot.V(disc.nodes)
        write_csv(args.out, ("x", "V", "Vinf", "rho_inf"), zip(disc.nodes, V, sol.V_inf, sol.rho))
    return EXIT_OK


def _setup(cfg, kappa):
    from .vpfp import prepare
    try:
        return prepare(potential_from(cfg), disc_from(cfg), kappa, sigma=cfg["mollifier.sigma"],
                       emden_tol=cfg["emden.tol"], theta=cfg["emden.theta"], kappa_limit=cfg["emden.kappa_max"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_threshold(cfg, args):
    from .vpfp import threshold
    setup = _setup(cfg, 0.0)
    kmax, info = threshold(setup, substep_tol=cfg["tol.substep"], seed=cfg["seed"])
    say(kappa_max=kmax)
    say(**{k: v for k, v in info.items() if k != "kappa_max"})
    return EXIT_OK


def cmd_vpfp(cfg, args):
    from .vpfp import CSV_COLUMNS, initial_state, run, threshold
    setup = _setup(cfg, args.kappa)
    dt = cfg["vpfp.dt"]
    T = args.tmax if args.tmax is not None else 10.0 * setup.report.A_const / setup.report.alpha
    every = cfg["vpfp.out_every"]
    n = max(every, int(np.ceil(T / dt / every)) * every)
    T = n * dt
    C2 = None
    if cfg["vpfp.method"] == "picard" and cfg["vpfp.window"] <= 0:
        C2 = threshold(setup, substep_tol=cfg["tol.substep"], seed=cfg["seed"])[1]["C2"]
    u0 = initial_state(setup.frame, beta=cfg["vpfp.beta"], v0=cfg["vpfp.v0"])
    r = run(setup, args.kappa, u0, T, dt, method=cfg["vpfp.method"], window=cfg["vpfp.window"],
            picard_tol=cfg["tol.picard"], out_every=every, C2=C2)
    viol_decay = int(np.sum(r.decay > r.envelope))
    viol_H = int(np.sum(r.entropy > r.entropy_envelope))
    mass_drift = float(np.max(np.abs(r.mass - 1.0)))
    say(kappa=args.kappa, T=T, alpha_inf=setup.report.alpha, A_inf=setup.report.A_const,
        decay_violations=viol_decay, entropy_violations=viol_H, mass_drift=mass_drift,
        max_clamped_mass=float(np.max(r.clamped_mass)))
    if args.out:
        write_csv(args.out, CSV_COLUMNS, r.rows())
    ok = viol_decay == 0 and viol_H == 0 and mass_drift <= cfg["tol.mass"]
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"assemble": cmd_assemble, "shorttime": cmd_shorttime, "lyapunov": cmd_lyapunov, "gap": cmd_gap,
            "decay": cmd_decay, "emden": cmd_emden, "vpfp": cmd_vpfp, "threshold": cmd_threshold}


def build_parser():
    p = argparse.ArgumentParser(prog="hypoflow", description="Kinetic Fokker-Planck numerical laboratory.",
                                epilog=help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file (defaults if omitted)")
    common.add_argument("--out", help="CSV output path; a <out>.manifest is written next to it")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--dump-operators", metavar="PREFIX", help="write the assembled matrices as dense text")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        s = sub.add_parser(name, parents=[common], epilog=help_text(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "shorttime":
            s.add_argument("--which", choices=("b", "a"), default="b")
        if name in ("emden", "vpfp"):
            s.add_argument("--kappa", type=float, required=True)
        if name == "vpfp":
            s.add_argument("--tmax", type=float, help="horizon (default 10 A_inf/alpha_inf)")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            cfg = cfg.replace(seed=args.seed)
        code = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"hypoflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, RuntimeError) as exc:
        print(f"hypoflow {args.command}: numerical failure: {exc}", file=sys.stderr)
        code = EXIT_FAIL
    if args.out:
        meta = {"command": args.command, **_versions(), "wall_time_s": f"{time.perf_counter() - t0:.3f}",
                "exit_code": code}
        for k in ("which", "kappa", "tmax"):
            if getattr(args, k, None) is not None:
                meta[k] = getattr(args, k)
        write_manifest(args.out, cfg, meta)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
