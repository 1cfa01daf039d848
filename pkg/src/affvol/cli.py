"""Command line interface: resolvent, riccati, transform, simulate, price and validate.

Exit codes: 0 success, 1 validation or configuration error, 2 numerical
error (blow-up, non-finite output), 64 usage error. CSV values are written
with 17 significant digits so that re-reading reproduces them exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels as kn
from .kernels import TimeGrid
from .model import AffineParams, HestonParams, StateSpace, heston_kernel, heston_to_affine, validate

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2, 64


class ConfigError(ValueError):
    """Invalid configuration file or command line value."""


class UsageError(Exception):
    pass


# ------------------------------------------------------------ configuration

@dataclass(frozen=True)
class RunSettings:
    steps: int = 500
    t: float = 1.0
    paths: int = 10_000
    seed: int = 42


@dataclass(frozen=True, eq=False)
class AffineModel:
    """A general affine Volterra model: kernel, coefficients and initial state."""

    kernel: kn.KernelSpec
    params: AffineParams
    x0: np.ndarray


@dataclass(frozen=True, eq=False)
class Config:
    model: object
    run: RunSettings = field(default_factory=RunSettings)
    path: str = ""


_HESTON_KEYS = {"s0", "v0", "kappa", "theta", "sigma", "rho", "kernel"}
_HESTON_REQUIRED = _HESTON_KEYS - {"kernel"}
_AFFINE_KEYS = {"state_space", "A", "b0", "B", "x0", "kernel", "sigma0"}
_AFFINE_REQUIRED = {"state_space", "A", "b0", "B", "x0"}
_RUN_KEYS = {"steps", "t", "paths", "seed"}


def _read_mapping(path: Path) -> dict:
    text = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        return tomllib.loads(text.decode())
    except tomllib.TOMLDecodeError as e:
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            raise ConfigError(f"{path}: not valid TOML ({e})") from None


def _keys_check(section, d, allowed, required):
    if not isinstance(d, dict):
        raise ConfigError(f"[{section}] must be a table")
    bad = sorted(set(d) - allowed)
    missing = sorted(required - set(d))
    msg = []
    if bad:
        msg.append(f"unknown keys in [{section}]: {', '.join(bad)}")
    if missing:
        msg.append(f"missing keys in [{section}]: {', '.join(missing)}")
    if msg:
        raise ConfigError("; ".join(msg))


def _kernel(d, where):
    try:
        return kn.kernel_from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{where}.kernel: {e}") from None


def parse_config(data: dict, source: str = "<config>") -> Config:
    """Validate a parsed mapping and build the model and run settings."""
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a table")
    bad = sorted(set(data) - {"heston", "affine", "run"})
    if bad:
        raise ConfigError(f"{source}: unknown top-level keys: {', '.join(bad)}")
    if ("heston" in data) == ("affine" in data):
        raise ConfigError(f"{source}: exactly one of [heston] or [affine] is required")
    run = data.get("run", {})
    _keys_check("run", run, _RUN_KEYS, set())
    try:
        rs = RunSettings(int(run.get("steps", 500)), float(run.get("t", 1.0)),
                         int(run.get("paths", 10_000)), int(run.get("seed", 42)))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{source}: [run] {e}") from None
    _check_run(rs)
    if "heston" in data:
        h = data["heston"]
        _keys_check("heston", h, _HESTON_KEYS, _HESTON_REQUIRED)
        k = _kernel(h.get("kernel", {"kind": "constant", "c": 1.0}), "heston")
        try:
            model = HestonParams(*(float(h[x]) for x in ("s0", "v0", "kappa", "theta", "sigma", "rho")), kernel=k)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{source}: [heston] {e}") from None
        return Config(model, rs, source)
    a = data["affine"]
    _keys_check("affine", a, _AFFINE_KEYS, _AFFINE_REQUIRED)
    try:
        p = AffineParams(np.array(a["A"], dtype=float), np.array(a["b0"], dtype=float),
                         np.array(a["B"], dtype=float), StateSpace(a["state_space"]),
                         None if a.get("sigma0") is None else np.array(a["sigma0"], dtype=float))
        x0 = np.array(a["x0"], dtype=float).reshape(p.d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{source}: [affine] {e}") from None
    errs = validate(p)
    if errs:
        raise ConfigError(f"{source}: [affine] " + "; ".join(errs))
    k = _kernel(a.get("kernel", {"kind": "constant", "c": 1.0}), "affine")
    if kn.is_scalar(k) and p.d > 1:
        k = kn.DiagonalMatrix((k,) * p.d)
    if len(kn.entries(k)) != p.d:
        raise ConfigError(f"{source}: [affine] kernel dimension does not match d = {p.d}")
    return Config(AffineModel(k, p, x0), rs, source)


def load_config(path) -> Config:
    """Read a TOML (or JSON) config file; see docs/config.md for the keys."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = _read_mapping(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return parse_config(data, str(path))


def _check_run(rs: RunSettings):
    if rs.steps < 1 or rs.paths < 1 or not (np.isfinite(rs.t) and rs.t > 0) or rs.seed < 0:
        raise ConfigError("run settings need steps >= 1, paths >= 1, t > 0 and seed >= 0")


def _model_parts(model):
    """(kernel, AffineParams, X0) of either model type."""
    if isinstance(model, HestonParams):
        return heston_kernel(model), heston_to_affine(model), np.array([np.log(model.s0), model.v0])
    return model.kernel, model.params, model.x0


# ------------------------------------------------------------------- values

def parse_complex(s: str) -> complex:
    t = s.strip().replace(" ", "").replace("i", "j").replace("J", "j")
    try:
        return complex(t)
    except ValueError:
        raise ConfigError(f"not a complex number: {s!r}") from None


def parse_complex_list(s: str) -> np.ndarray:
    return np.array([parse_complex(x) for x in s.split(",") if x.strip()], dtype=complex)


def parse_u_grid(spec: str, d: int) -> np.ndarray:
    """'im:start:stop:num[@k]' or 're:...' sweeps component k (default 0); otherwise 'u;u;...' lists."""
    spec = spec.strip()
    head = spec.split(":", 1)[0].lower()
    if head in ("im", "re"):
        body, _, comp = spec[3:].partition("@")
        parts = body.split(":")
        if len(parts) != 3:
            raise ConfigError(f"u-grid range must be {head}:start:stop:num[@k], got {spec!r}")
        try:
            a, b, m = float(parts[0]), float(parts[1]), int(parts[2])
            k = int(comp) if comp else 0
        except ValueError:
            raise ConfigError(f"bad u-grid spec {spec!r}") from None
        if m < 1 or not 0 <= k < d:
            raise ConfigError(f"bad u-grid spec {spec!r}")
        v = np.linspace(a, b, m)
        u = np.zeros((m, d), dtype=complex)
        u[:, k] = 1j * v if head == "im" else v
        return u
    rows = [parse_complex_list(r) for r in spec.split(";") if r.strip()]
    if not rows or any(r.size != d for r in rows):
        raise ConfigError(f"each u in the grid needs {d} components")
    return np.array(rows)


def parse_functional(spec: str, d: int):
    """'u=<list>[;f=<list>]' with a constant row f."""
    out = {}
    for part in spec.split(";"):
        if not part.strip():
            continue
        key, _, val = part.partition("=")
        key = key.strip().lower()
        if key not in ("u", "f") or not val:
            raise ConfigError(f"functional spec must look like 'u=0,1j;f=0,0', got {spec!r}")
        out[key] = parse_complex_list(val)
    if "u" not in out or out["u"].size != d or ("f" in out and out["f"].size != d):
        raise ConfigError(f"functional needs u (and optional f) with {d} components")
    return out["u"], out.get("f")


def parse_float_list(s: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in s.split(",") if x.strip()])
    except ValueError:
        raise ConfigError(f"not a list of numbers: {s!r}") from None
    if v.size == 0:
        raise ConfigError("empty list")
    return v


# ---------------------------------------------------------------------- CSV

def fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(out, header, rows, force=False):
    """Write rows to a path (never overwriting without force) or to stdout when out is None or '-'."""
    if out is None or str(out) == "-":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows([fmt(x) for x in r] for r in rows)
        return
    path = Path(out)
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([fmt(x) for x in r] for r in rows)


def read_csv(path):
    """Header and float rows of a CSV written by this tool (string cells kept)."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = []
        for row in r:
            vals = []
            for c in row:
                try:
                    vals.append(float(c))
                except ValueError:
                    vals.append(c)
            rows.append(vals)
    return header, rows


# -------------------------------------------------------------- subcommands

def _settings(args, cfg=None) -> RunSettings:
    base = cfg.run if cfg is not None else RunSettings()
    rs = RunSettings(
        args.steps if getattr(args, "steps", None) is not None else base.steps,
        args.t if getattr(args, "t", None) is not None else base.t,
        args.paths if getattr(args, "paths", None) is not None else base.paths,
        args.seed if getattr(args, "seed", None) is not None else base.seed,
    )
    _check_run(rs)
    return rs


def _json_arg(s, what):
    p = Path(s)
    try:
        return json.loads(p.read_text()) if p.is_file() else json.loads(s)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what}: not valid JSON ({e})") from None


def _value_columns(prefix, shape):
    if shape == ():
        return [prefix]
    if len(shape) == 1:
        return [f"{prefix}_{i}" for i in range(shape[0])]
    return [f"{prefix}_{i}_{j}" for i in range(shape[0]) for j in range(shape[1])]


def cmd_resolvent(args):
    from .resolvents import (eb_residuals, first_kind_residuals, resolvent_first_kind, resolvent_pair_b,
                             resolvent_second_kind, second_kind_residuals)
    k = _kernel(_json_arg(args.kernel, "--kernel"), "--kernel")
    if args.steps < 1 or not (args.t_end > 0):
        raise ConfigError("--steps must be >= 1 and --t-end > 0")
    g = TimeGrid(args.t_end, args.steps)
    d = len(kn.entries(k))
    if args.which == "second":
        r = resolvent_second_kind(k, g)
        vals, res = r.values, second_kind_residuals(k, r)
    elif args.which == "first":
        L = resolvent_first_kind(k, g)
        # atom at t = 0 in the first row, cell densities at the left nodes after it
        vals = np.concatenate([L.atom0[None], L.density])
        res = first_kind_residuals(k, L)
    else:
        if args.b_matrix is None:
            raise ConfigError("--which eb needs --b-matrix")
        B = np.array(_json_arg(args.b_matrix, "--b-matrix"), dtype=float)
        if B.size != d * d:
            raise ConfigError(f"--b-matrix must be {d}x{d}")
        rb, eb = resolvent_pair_b(k, B.reshape(d, d), g)
        vals, res = eb.values, eb_residuals(k, rb, eb)
    if args.which != "eb" and args.b_matrix is not None:
        raise ConfigError("--b-matrix only applies to --which eb")
    shape = vals.shape[1:]
    header = ["t"] + _value_columns("value", shape) + ["residual"]
    rows = [[t] + list(np.ravel(v)) + [r] for t, v, r in zip(g.nodes, vals, res)]
    write_csv(args.out, header, rows, args.force)
    print(f"max residual (t > 0): {np.nanmax(res):.3e}", file=sys.stderr)
    return EXIT_OK


def _riccati_solve(model, u, rs, **kw):
    from .riccati import TransformInputs, solve_riccati
    k, p, _ = _model_parts(model)
    g = TimeGrid(rs.t, rs.steps)
    return solve_riccati(k, p, TransformInputs(u, kw.pop("f", None), rs.t), g, **kw), k, p


def cmd_riccati(args):
    cfg = load_config(args.model)
    rs = _settings(args, cfg)
    _, p, _ = _model_parts(cfg.model)
    u = parse_complex_list(args.u)
    if u.size != p.d:
        raise ConfigError(f"--u needs {p.d} components")
    sol, _, _ = _riccati_solve(cfg.model, u, rs)
    d = p.d
    header = ["t"] + [f"psi{i + 1}_{c}" for i in range(d) for c in ("re", "im")] + ["phi_re", "phi_im"] \
        + [f"chi{i + 1}_{c}" for i in range(d) for c in ("re", "im")] + ["status"]
    rows = []
    for i, t in enumerate(sol.grid.nodes):
        row = [t]
        for x in sol.psi[i]:
            row += [x.real, x.imag]
        row += [sol.phi[i].real, sol.phi[i].imag]
        for x in sol.chi[i]:
            row += [x.real, x.imag]
        rows.append(row + [sol.status])
    write_csv(args.out, header, rows, args.force)
    if not sol.is_global:
        print(f"Riccati solution blew up near t = {sol.t_max:.6g}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_transform(args):
    from .riccati import TransformInputs, solve_riccati
    from .transform import hypothesis_status, y_zero
    cfg = load_config(args.model)
    rs = _settings(args, cfg)
    k, p, x0 = _model_parts(cfg.model)
    U = parse_u_grid(args.u_grid, p.d)
    inp = TransformInputs(U, None, rs.t)
    sol = solve_riccati(k, p, inp, TimeGrid(rs.t, rs.steps))
    ok = np.atleast_1d(np.asarray(sol.status) == "global")
    y = np.full(U.shape[0], np.nan + 0j)
    if np.all(ok):
        y = y_zero(x0, sol, p)
    elif np.any(ok):
        sub = solve_riccati(k, p, TransformInputs(U[ok], None, rs.t), TimeGrid(rs.t, rs.steps))
        y[ok] = y_zero(x0, sub, p)
    header = [f"u{i + 1}_{c}" for i in range(p.d) for c in ("re", "im")] + \
        ["value_re", "value_im", "y0_re", "y0_im", "status", "hypothesis"]
    rows = []
    for j in range(U.shape[0]):
        row = []
        for x in U[j]:
            row += [x.real, x.imag]
        v = np.exp(y[j])
        hs = hypothesis_status(p, TransformInputs(U[j], None, rs.t), TimeGrid(rs.t, rs.steps))
        rows.append(row + [v.real, v.imag, y[j].real, y[j].imag, "global" if ok[j] else "blowup",
                           hs.replace(" ", "_")])
    write_csv(args.out, header, rows, args.force)
    return EXIT_OK if np.all(ok) else EXIT_NUMERICAL


def _simulate(model, rs, scheme, store="path"):
    from .simulate import simulate_heston, simulate_ou_exact, simulate_volterra_euler
    g = TimeGrid(rs.t, rs.steps)
    if isinstance(model, HestonParams):
        sch = "ivi" if scheme == "auto" else scheme
        if sch not in ("ivi", "euler"):
            raise ConfigError("Heston models use --scheme ivi or euler")
        return simulate_heston(model, g, rs.paths, seed=rs.seed, store=store, scheme=sch)
    k, p, x0 = _model_parts(model)
    sch = scheme
    if sch == "auto":
        sch = "exact" if p.state_space is StateSpace.REAL else "euler"
    if sch == "exact":
        return simulate_ou_exact(k, p, x0, g, rs.paths, seed=rs.seed)
    if sch == "euler":
        return simulate_volterra_euler(k, p, x0, g, rs.paths, seed=rs.seed, store=store)
    raise ConfigError("affine models use --scheme exact or euler")


def cmd_simulate(args):
    from .riccati import TransformInputs
    from .simulate import configure_threads, mc_functional
    cfg = load_config(args.model)
    rs = _settings(args, cfg)
    _, p, _ = _model_parts(cfg.model)
    fun = parse_functional(args.functional, p.d) if args.functional else None
    if args.out_paths and Path(args.out_paths).exists() and not args.force:
        raise ConfigError(f"{args.out_paths} exists; pass --force to overwrite")
    configure_threads()
    store = "path" if (args.out_paths or (fun is not None and fun[1] is not None)) else "terminal"
    ens = _simulate(cfg.model, rs, args.scheme, store)
    xT = ens.terminal()
    se = xT.std(axis=0, ddof=1) / np.sqrt(ens.n_paths) if ens.n_paths > 1 else np.zeros(p.d)
    print(f"scheme {ens.scheme_tag}, {ens.n_paths} paths, {rs.steps} steps, seed {rs.seed}")
    for i in range(p.d):
        print(f"E[X{i + 1}(T)] = {xT[:, i].mean():.10g} +- {se[i]:.3g}")
    if isinstance(cfg.model, HestonParams):
        sT = np.exp(xT[:, 0])
        print(f"E[S(T)] = {sT.mean():.10g} +- {sT.std(ddof=1) / np.sqrt(ens.n_paths):.3g} (S0 = {cfg.model.s0:.10g})")
    if fun is not None:
        est, err = mc_functional(ens, TransformInputs(fun[0], fun[1], rs.t))
        print(f"functional = {est.real:.10g} {est.imag:+.10g}i, SE {err:.3g}")
    if args.out_paths:
        t = ens.grid.nodes[ens.stored]
        rows = ([j, t[s]] + list(ens.data[j, s]) for j in range(ens.n_paths) for s in range(t.size))
        write_csv(args.out_paths, ["path_id", "t"] + [f"x{i + 1}" for i in range(p.d)], rows, True)
    return EXIT_OK


def cmd_price(args):
    from .pricing import implied_vol, mc_price, price_european
    from .simulate import configure_threads
    cfg = load_config(args.model)
    h = cfg.model
    if not isinstance(h, HestonParams):
        raise ConfigError("price needs a [heston] model")
    rs = _settings(args, cfg)
    K = parse_float_list(args.strikes)
    if np.any(K <= 0):
        raise ConfigError("strikes must be positive")
    configure_threads()
    call = price_european(h, K, rs.t, "call", steps=rs.steps, damping=args.damping)
    put = call - h.s0 + K
    iv = []
    for c, k in zip(call, K):
        try:
            iv.append(implied_vol(c, h.s0, k, rs.t))
        except ValueError:
            iv.append(np.nan)
    if args.no_mc:
        mp = ms = np.full(K.size, np.nan)
    else:
        mp, ms = mc_price(h, K, rs.t, "call", n_paths=rs.paths, steps=rs.steps, seed=rs.seed)
    rows = [[k, c, pp, v, m, s] for k, c, pp, v, m, s in zip(K, call, put, iv, mp, ms)]
    write_csv(args.out, ["strike", "call", "put", "implied_vol", "mc_price", "mc_se"], rows, args.force)
    return EXIT_OK


# ----------------------------------------------------------------- validate

def _suite_classical_limit(args):
    """Checks for K = Constant(1), where the Volterra machinery must reduce to classical Heston."""
    from .pricing import classical_heston_call, classical_heston_riccati, price_european
    from .riccati import TransformInputs, solve_riccati_heston
    from .simulate import simulate_heston
    from .transform import adjustment_pi, transform_at_zero
    h = HestonParams(1.0, 0.04, 1.5, 0.05, 0.5, -0.7, kn.Constant(1.0))
    T, n = 1.0, 1000
    g = TimeGrid(T, n)
    out = []
    U1 = np.array([1j, 2j, 0.5j])
    sol = solve_riccati_heston(h, TransformInputs(np.stack([U1, 0 * U1], 1), None, T), g)
    e_psi = e_phi = e_tr = 0.0
    tr = transform_at_zero([0.0, h.v0], sol, heston_to_affine(h))
    for j, u1 in enumerate(U1):
        ps, ph = classical_heston_riccati(h, u1, g.nodes)
        e_psi = max(e_psi, np.abs(sol.psi[j, :, 1] - ps).max())
        e_phi = max(e_phi, np.abs(sol.phi[j] - ph).max())
        e_tr = max(e_tr, abs(tr[j] - np.exp(ph[-1] + ps[-1] * h.v0)))
    out += [("psi_2 vs closed form", e_psi, 1e-5), ("phi vs closed form", e_phi, 1e-5),
            ("transform vs closed form", e_tr, 1e-4)]
    _, pi = adjustment_pi(heston_kernel(h), heston_to_affine(h), 0.25, TimeGrid(T, 200))
    out.append(("Pi_h vanishes", float(np.abs(pi).max()), 1e-12))
    K = np.array([80.0, 100.0, 120.0])
    hp = HestonParams(100.0, h.v0, h.kappa, h.theta, h.sigma, h.rho, h.kernel)
    c = price_european(hp, K, T, steps=500)
    out.append(("Fourier price vs closed form (relative)", float(np.abs(c / classical_heston_call(hp, K, T) - 1).max()), 1e-5))
    rs = _settings(args)
    ens = simulate_heston(hp, TimeGrid(T, min(rs.steps, 200)), rs.paths, seed=rs.seed, store="terminal")
    sT = np.exp(ens.terminal()[:, 0])
    out.append(("martingality |mean S_T - S0| / SE", abs(sT.mean() - hp.s0) / (sT.std(ddof=1) / np.sqrt(sT.size)), 3.0))
    return out


def _suite_transform_mc(args):
    """Transform against Monte Carlo at u = (iv, 0) for a Heston model."""
    from .riccati import TransformInputs, solve_riccati_heston
    from .simulate import mc_functional, simulate_heston
    from .transform import transform_at_zero
    if args.model:
        cfg = load_config(args.model)
        h = cfg.model
        if not isinstance(h, HestonParams):
            raise ConfigError("transform-mc needs a [heston] model")
    else:
        cfg, h = None, HestonParams(1.0, 0.04, 1.0, 0.04, 0.3, -0.7, kn.Fractional(1.0, 0.6))
    rs = _settings(args, cfg)
    g = TimeGrid(rs.t, rs.steps)
    ens = simulate_heston(h, g, rs.paths, seed=rs.seed, store="terminal")
    out = []
    for v in (0.5, 1.0, 2.0):
        u = np.array([1j * v, 0.0])
        sol = solve_riccati_heston(h, TransformInputs(u, None, rs.t), g)
        tr = transform_at_zero([np.log(h.s0), h.v0], sol, heston_to_affine(h))
        est, se = mc_functional(ens, TransformInputs(u, None, rs.t))
        out.append((f"|MC - transform| / SE at v = {v}", abs(est - tr) / se, 3.0))
    return out


SUITES = {"classical-limit": _suite_classical_limit, "transform-mc": _suite_transform_mc}


def cmd_validate(args):
    from .simulate import configure_threads
    configure_threads()
    t0 = time.perf_counter()
    res = SUITES[args.suite](args)
    ok_all = True
    width = max(len(r[0]) for r in res)
    rows = []
    for name, val, tol in res:
        ok = bool(np.isfinite(val) and val <= tol)
        ok_all &= ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {val:.3e}  (tol {tol:.1e})")
        rows.append([name, val, tol, "PASS" if ok else "FAIL"])
    print(f"{args.suite}: {'all passed' if ok_all else 'failures'} in {time.perf_counter() - t0:.1f} s")
    if args.out:
        write_csv(args.out, ["check", "value", "tolerance", "status"], rows, args.force)
    return EXIT_OK if ok_all else EXIT_VALIDATION


# -------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="affvol", description="Affine Volterra processes: resolvents, transforms, simulation, pricing")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=True, paths=False):
        if model:
            sp.add_argument("--model", required=True, help="TOML or JSON config file")
        sp.add_argument("--t", type=float, default=None, help="horizon (default 1.0 or [run].t)")
        sp.add_argument("--steps", type=int, default=None, help="grid steps (default 500 or [run].steps)")
        if paths:
            sp.add_argument("--paths", type=int, default=None, help="Monte Carlo paths (default 10000)")
            sp.add_argument("--seed", type=int, default=None, help="random seed (default 42)")
        sp.add_argument("--force", action="store_true", help="overwrite existing output files")

    sp = sub.add_parser("resolvent", help="resolvents of the first or second kind, or E_B")
    sp.add_argument("--kernel", required=True, help="kernel JSON, inline or a file")
    sp.add_argument("--t-end", type=float, default=1.0)
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--which", choices=("first", "second", "eb"), default="second")
    sp.add_argument("--b-matrix", default=None, help="B as JSON (for --which eb)")
    sp.add_argument("--out", default=None, help="CSV path (stdout if omitted)")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_resolvent)

    sp = sub.add_parser("riccati", help="solve the Riccati-Volterra system")
    common(sp)
    sp.add_argument("--u", required=True, help="comma separated complex components, e.g. '0,-1' or '0.5+2i,0'")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_riccati)

    sp = sub.add_parser("transform", help="exponential-affine transform over a grid of u")
    common(sp)
    sp.add_argument("--u-grid", required=True, help="'im:start:stop:num[@k]', 're:...' or 'u;u;...'")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_transform)

    sp = sub.add_parser("simulate", help="Monte Carlo paths")
    common(sp, paths=True)
    sp.add_argument("--scheme", choices=("auto", "ivi", "euler", "exact"), default="auto")
    sp.add_argument("--out-paths", default=None, help="CSV with columns path_id, t, x1..xd")
    sp.add_argument("--functional", default=None, help="'u=<list>[;f=<list>]' Monte Carlo transform")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("price", help="European calls and puts by Fourier inversion, with a Monte Carlo check")
    common(sp, paths=True)
    sp.add_argument("--strikes", required=True, help="comma separated strikes")
    sp.add_argument("--damping", type=float, default=0.5, help="contour Re u_1, strictly inside (0, 1)")
    sp.add_argument("--no-mc", action="store_true", help="skip the Monte Carlo columns")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_price)

    sp = sub.add_parser("validate", help="cross-check suites with a PASS/FAIL table")
    sp.add_argument("--suite", choices=tuple(SUITES), required=True)
    sp.add_argument("--model", default=None, help="Heston config for transform-mc (rough Heston by default)")
    sp.add_argument("--t", type=float, default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--paths", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default=None)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_validate)
    return ap


def run(argv=None) -> int:
    """Parse argv, dispatch and map failures to exit codes."""
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except ArithmeticError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


def main():
    # numba reports an outdated TBB library once per process; the workqueue layer is used instead
    warnings.filterwarnings("ignore", message="The TBB threading layer")
    sys.exit(run())


if __name__ == "__main__":
    main()
