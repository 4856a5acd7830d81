"""Load and save plant configuration files (TOML).

Layout::

    [dimensions]  n, p, n_xi
    [lambda]      values = n expressions
    [A]           values = n x n expressions (nested or flat row-major)
    [C1]          values = n x n_xi expressions (optional, default zero)
    [boundary]    Q0, Q1, C2 numeric arrays
    [ode]         F, B numeric arrays
    [design]      controller_poles, observer_poles, N, tol, max_iter, seed
    [design.artificial]           l, m, n tables keyed by "i,j" (1-based)
    [design.observer_artificial]  same for the observer kernel
    [simulation]  cfl, t_final, x0, xi0, xhat0, xihat0, decimation

Numeric entries may be numbers or constant expressions such as ``"2*e^3"``.
Poles may be numbers or strings accepted by :class:`complex` (``"-1+2j"``).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:  # Python >= 3.11
    import tomllib as _toml_reader
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as _toml_reader
import tomli_w

from .expr import ExpressionError, parse
from .model import DesignParams, PlantSpec, ScalarFunction, SimConfig

__all__ = ["Config", "ConfigError", "load_config", "loads_config", "save_config", "dumps_config"]


class ConfigError(ValueError):
    """Malformed or inconsistent configuration file."""


@dataclass
class Config:
    spec: PlantSpec
    params: DesignParams
    sim: SimConfig
    source_hash: str = ""


def _shape_entries(raw, rows, cols, what):
    if raw is None:
        raise ConfigError(f"{what}: missing")
    if rows * cols == 0:
        return []
    flat = []
    if isinstance(raw, list) and raw and all(isinstance(r, list) for r in raw):
        if len(raw) != rows or any(len(r) != cols for r in raw):
            raise ConfigError(f"{what}: expected {rows}x{cols} entries")
        flat = [v for r in raw for v in r]
    elif isinstance(raw, list):
        if len(raw) != rows * cols:
            raise ConfigError(f"{what}: expected {rows * cols} entries, got {len(raw)}")
        flat = list(raw)
    else:
        raise ConfigError(f"{what}: expected an array")
    return [flat[r * cols:(r + 1) * cols] for r in range(rows)]


def _number(v, what):
    if isinstance(v, bool):
        raise ConfigError(f"{what}: booleans are not numbers")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            e = parse(v)
        except ExpressionError as exc:
            raise ConfigError(f"{what}: {exc}") from exc
        val = e.evaluate(0.0)
        if abs(e.evaluate(1.0) - val) > 0.0 or not np.isfinite(val):
            raise ConfigError(f"{what}: constant expected, got {v!r}")
        return float(val)
    raise ConfigError(f"{what}: expected a number, got {v!r}")


def _matrix(raw, rows, cols, what):
    if rows * cols == 0:
        return np.zeros((rows, cols))
    ent = _shape_entries(raw, rows, cols, what)
    return np.array([[_number(v, what) for v in r] for r in ent], dtype=float).reshape(rows, cols)


def _function(v, what):
    try:
        return ScalarFunction.coerce(v)
    except ExpressionError as exc:
        raise ConfigError(f"{what}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from exc


def _function_matrix(raw, rows, cols, what):
    ent = _shape_entries(raw, rows, cols, what)
    return [[_function(v, f"{what}[{i + 1},{j + 1}]") for j, v in enumerate(r)] for i, r in enumerate(ent)]


def _poles(raw, what):
    if not isinstance(raw, list):
        raise ConfigError(f"{what}: expected a list")
    out = []
    for v in raw:
        try:
            out.append(complex(v.replace(" ", "")) if isinstance(v, str) else complex(v))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{what}: cannot read pole {v!r}") from exc
    return out


def _artificial(tab, what):
    out = {}
    for name in ("l", "m", "n"):
        d = {}
        for key, v in dict(tab.get(name, {})).items():
            try:
                i, j = (int(s) for s in key.split(","))
            except ValueError as exc:
                raise ConfigError(f"{what}.{name}: key {key!r} must look like 'i,j'") from exc
            d[(i - 1, j - 1)] = _function(v, f"{what}.{name}[{key}]")
        out[name] = d
    return out


def _section(data, name):
    sec = data.get(name)
    if sec is None:
        raise ConfigError(f"missing section [{name}]")
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def loads_config(text: str) -> Config:
    """Parse configuration text."""
    try:
        data = _toml_reader.loads(text)
    except _toml_reader.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from exc
    dims = _section(data, "dimensions")
    try:
        n, p, n_xi = int(dims["n"]), int(dims["p"]), int(dims["n_xi"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("[dimensions] needs integers n, p, n_xi") from exc
    if "m" in dims and int(dims["m"]) != n - p:
        raise ConfigError("[dimensions] p + m must equal n")
    if not (n >= 2 and 1 <= p < n and n_xi >= 1):
        raise ConfigError("[dimensions] need n >= 2, 1 <= p < n and n_xi >= 1")
    m = n - p
    lam_raw = _section(data, "lambda").get("values")
    if not isinstance(lam_raw, list) or len(lam_raw) != n:
        raise ConfigError(f"[lambda] values must list {n} entries")
    lam = [_function(v, f"lambda[{i + 1}]") for i, v in enumerate(lam_raw)]
    A = _function_matrix(_section(data, "A").get("values"), n, n, "A")
    if "C1" in data:
        C1 = _function_matrix(data["C1"].get("values"), n, n_xi, "C1")
    else:
        C1 = [[ScalarFunction.constant(0.0) for _ in range(n_xi)] for _ in range(n)]
    bnd = _section(data, "boundary")
    ode = _section(data, "ode")
    try:
        spec = PlantSpec(
            n=n, p=p, n_xi=n_xi, Lambda=lam, A=A, C1=C1,
            Q0=_matrix(bnd.get("Q0"), m, p, "Q0"),
            Q1=_matrix(bnd.get("Q1"), p, m, "Q1"),
            C2=_matrix(bnd.get("C2"), m, n_xi, "C2"),
            F=_matrix(ode.get("F"), n_xi, n_xi, "F"),
            B=_matrix(ode.get("B"), n_xi, p, "B"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    des = _section(data, "design")
    art = _artificial(des.get("artificial", {}), "design.artificial")
    oart = _artificial(des.get("observer_artificial", {}), "design.observer_artificial")
    try:
        params = DesignParams(
            controller_poles=_poles(des.get("controller_poles"), "controller_poles"),
            observer_poles=_poles(des.get("observer_poles"), "observer_poles"),
            N=int(des.get("N", 200)),
            tol=float(des.get("tol", 1e-10)),
            max_iter=int(des.get("max_iter", 200)),
            seed=int(des.get("seed", 0)),
            l=art["l"], m=art["m"], n=art["n"],
            obs_l=oart["l"], obs_m=oart["m"], obs_n=oart["n"],
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[design]: {exc}") from exc
    simd = data.get("simulation", {})
    try:
        sim = SimConfig(
            cfl=float(simd.get("cfl", 0.9)),
            t_final=float(simd.get("t_final", 6.0)),
            x0=[_function(v, "x0") for v in simd["x0"]] if "x0" in simd else None,
            xi0=[_number(v, "xi0") for v in simd["xi0"]] if "xi0" in simd else None,
            xhat0=[_function(v, "xhat0") for v in simd["xhat0"]] if "xhat0" in simd else None,
            xihat0=[_number(v, "xihat0") for v in simd["xihat0"]] if "xihat0" in simd else None,
            decimation=int(simd.get("decimation", 10)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[simulation]: {exc}") from exc
    return Config(spec, params, sim, hashlib.sha256(text.encode()).hexdigest())


def load_config(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return loads_config(text)


def _fn(f: ScalarFunction):
    return f.to_config()


def _pole_out(c: complex):
    return c.real if c.imag == 0 else f"{c.real!r}{c.imag:+}j"


def _art_out(d):
    return {name: {f"{i + 1},{j + 1}": _fn(f) for (i, j), f in sorted(v.items())} for name, v in d.items() if v}


def dumps_config(cfg: Config) -> str:
    """Serialise a configuration; the inverse of :func:`loads_config`."""
    s, d, sim = cfg.spec, cfg.params, cfg.sim
    data = {
        "dimensions": {"n": s.n, "p": s.p, "n_xi": s.n_xi},
        "lambda": {"values": [_fn(f) for f in s.Lambda]},
        "A": {"values": [[_fn(f) for f in r] for r in s.A]},
        "C1": {"values": [[_fn(f) for f in r] for r in s.C1]},
        "boundary": {"Q0": s.Q0.tolist(), "Q1": s.Q1.tolist(), "C2": s.C2.tolist()},
        "ode": {"F": s.F.tolist(), "B": s.B.tolist()},
        "design": {
            "controller_poles": [_pole_out(c) for c in d.controller_poles],
            "observer_poles": [_pole_out(c) for c in d.observer_poles],
            "N": d.N, "tol": d.tol, "max_iter": d.max_iter, "seed": d.seed,
        },
        "simulation": {"cfl": sim.cfl, "t_final": sim.t_final, "decimation": sim.decimation},
    }
    art = _art_out({"l": d.l, "m": d.m, "n": d.n})
    if art:
        data["design"]["artificial"] = art
    oart = _art_out({"l": d.obs_l, "m": d.obs_m, "n": d.obs_n})
    if oart:
        data["design"]["observer_artificial"] = oart
    for name in ("x0", "xhat0"):
        v = getattr(sim, name)
        if v is not None:
            data["simulation"][name] = [_fn(f) for f in v]
    for name in ("xi0", "xihat0"):
        v = getattr(sim, name)
        if v is not None:
            data["simulation"][name] = [float(x) for x in v]
    return tomli_w.dumps(data)


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(dumps_config(cfg))
