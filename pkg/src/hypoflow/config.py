"""key = value configuration files and run manifests."""
from dataclasses import dataclass
import math


class ConfigError(ValueError):
    pass


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _unit(x):
    return 0 < x <= 1


def _finite(x):
    return math.isfinite(x)


# key: (type, default, check, description)
SCHEMA = {
    "potential.kind": (str, "quadratic", ("quadratic", "harmonic", "quartic_double_well", "polynomial"),
                       "confining potential family"),
    "potential.omega": (float, 1.0, _pos, "harmonic frequency"),
    "potential.coeffs": (str, "", None, "comma separated: 'a,b' for the double well, ascending coefficients for polynomial"),
    "disc.nx": (int, 256, lambda n: 16 <= n <= 200_000, "interior position nodes"),
    "disc.nv": (int, 32, lambda n: 8 <= n <= 4096, "Hermite modes"),
    "disc.xmax": (float, 8.0, _pos, "half-width of the position box"),
    "disc.gamma": (float, 1.0, _pos, "friction"),
    "seed": (int, 42, _nonneg, "seed for random probes and initial states"),
    "evolve.method": (str, "crank_nicolson", ("crank_nicolson", "dense_expm"), "propagator"),
    "tol.substep": (float, 1e-8, _pos, "Crank-Nicolson refinement tolerance"),
    "tol.power": (float, 1e-6, _pos, "power iteration relative tolerance"),
    "tol.picard": (float, 1e-10, _pos, "Picard stopping tolerance"),
    "tol.mass": (float, 1e-6, _pos, "allowed mass drift"),
    "scan.tmin": (float, 1e-3, _pos, "short-time scan start"),
    "scan.tmax": (float, 1e-1, _pos, "short-time scan end"),
    "scan.points": (int, 9, lambda n: n >= 2, "short-time scan points (log spaced)"),
    "scan.iters": (int, 20, lambda n: n >= 1, "power iterations per scan point"),
    "lyapunov.tmax": (float, 1.0, _pos, "Lyapunov track horizon"),
    "lyapunov.points": (int, 101, lambda n: n >= 2, "Lyapunov track points (uniform)"),
    "decay.tmin": (float, 0.01, _pos, "long-time scan start"),
    "decay.tmax": (float, 20.0, _pos, "long-time scan end"),
    "decay.points": (int, 40, lambda n: n >= 2, "long-time scan points (log spaced)"),
    "mollifier.sigma": (float, 0.5, _pos, "Gaussian mollifier width"),
    "emden.tol": (float, 1e-8, _pos, "Poisson-Emden residual tolerance"),
    "emden.theta": (float, 0.5, _unit, "fixed point damping"),
    "emden.kappa_max": (float, 50.0, _pos, "largest admissible |kappa|"),
    "vpfp.dt": (float, 0.05, _pos, "time step"),
    "vpfp.method": (str, "march", ("march", "picard"), "self-consistent solver"),
    "vpfp.window": (float, 0.0, _nonneg, "Picard window, 0 for the automatic choice"),
    "vpfp.out_every": (int, 10, lambda n: n >= 1, "steps between outputs"),
    "vpfp.beta": (float, 0.5, _finite, "spatial tilt of the initial datum"),
    "vpfp.v0": (float, 1.0, _finite, "velocity shift of the initial datum"),
}


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class Config:
    values: tuple

    def __getitem__(self, key):
        return dict(self.values)[key]

    def as_dict(self):
        return dict(self.values)

    def replace(self, **kw):
        d = self.as_dict()
        for k, v in kw.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown key '{key}'")
            d[key] = _validate(key, v, None)
        return Config(tuple(sorted(d.items())))

    def to_text(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values)

    def coeffs(self):
        s = self["potential.coeffs"].strip()
        if not s:
            return []
        try:
            return [float(t) for t in s.split(",")]
        except ValueError:
            raise ConfigError(f"potential.coeffs: malformed number list '{s}'") from None


def _where(lineno):
    return f"line {lineno}: " if lineno is not None else ""


def _validate(key, raw, lineno):
    typ, _, check, _ = SCHEMA[key]
    if typ is str:
        val = str(raw).strip()
    else:
        try:
            if typ is int:
                if isinstance(raw, str) and not raw.strip().lstrip("+-").isdigit():
                    raise ValueError
                val = int(raw)
            else:
                val = float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{_where(lineno)}{key}: malformed {typ.__name__} '{raw}'") from None
        if typ is float and not math.isfinite(val):
            raise ConfigError(f"{_where(lineno)}{key}: value must be finite")
    if isinstance(check, tuple):
        if val not in check:
            raise ConfigError(f"{_where(lineno)}{key}: '{val}' not one of {', '.join(check)}")
    elif check is not None and not check(val):
        raise ConfigError(f"{_where(lineno)}{key}: value {val} out of range")
    return val


def defaults():
    return Config(tuple(sorted((k, s[1]) for k, s in SCHEMA.items())))


def parse_text(text):
    d = defaults().as_dict()
    seen = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (t.strip() for t in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key '{key}' (first set on line {seen[key]})")
        seen[key] = lineno
        d[key] = _validate(key, raw, lineno)
    cfg = Config(tuple(sorted(d.items())))
    if cfg["scan.tmin"] >= cfg["scan.tmax"]:
        raise ConfigError("scan.tmin must be below scan.tmax")
    if cfg["decay.tmin"] >= cfg["decay.tmax"]:
        raise ConfigError("decay.tmin must be below decay.tmax")
    cfg.coeffs()
    return cfg


def parse_config(path):
    if path is None:
        return defaults()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc.strerror}") from None
    return parse_text(text)


def help_text():
    w = max(len(k) for k in SCHEMA)
    lines = ["configuration keys (key = value, '#' starts a comment):"]
    for k, (typ, default, check, desc) in SCHEMA.items():
        choice = f" [{'|'.join(check)}]" if isinstance(check, tuple) else ""
        lines.append(f"  {k:<{w}}  {typ.__name__:<5} default {_fmt(default)!s:<16} {desc}{choice}")
    return "\n".join(lines)


def manifest_text(cfg, meta):
    """Config echo followed by commented metadata, so the manifest parses back to ``cfg``."""
    out = [cfg.to_text()]
    out.extend(f"# {k} = {v}\n" for k, v in meta.items())
    return "".join(out)
