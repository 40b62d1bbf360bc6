"""Command-line front end: configured runs, warm-started parameter sweeps
and the numerical validation suite.

Exit codes: 0 success, 1 failed validation, 2 configuration error,
3 non-convergence (partial outputs are still written), 4 linear-solver
failure.  Every nonzero exit prints one structured stderr line of the form
``error: <category>: <detail>``.
"""
import argparse
import math
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

from .driver import (
    ContinuationSchedule,
    Workspace,
    continuation_solve,
    fixed_point,
)
from .geometry import FlowParams, build_mesh
from .postprocess import (
    CENSUS_THRESHOLD,
    export_csv,
    export_vtk,
    extrema,
    recover_stream_function,
    vortex_census,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_CONVERGENCE = 3
EXIT_SOLVER = 4


class ConfigError(Exception):
    """Configuration problem; the message names the offending key."""


# ------------------------------------------------------------- configuration

@dataclass(frozen=True)
class ContinuationConfig:
    enabled: bool = True
    d_re: float = 1.0
    d_alpha: float = 0.05
    max_halvings: int = 4


@dataclass(frozen=True)
class RunConfig:
    delta: float = 0.0
    reynolds: float = 0.0
    alpha: float = 0.0
    pstar: float = 4.0
    nr: int = 16
    ntheta: int = 48
    tol: float = 1e-8
    max_iter: int = 200
    quad_degree: int = 6
    census_epsilon: float = CENSUS_THRESHOLD
    out_dir: str = "."
    continuation: ContinuationConfig = field(default_factory=ContinuationConfig)


@dataclass(frozen=True)
class SweepSpec:
    parameter: str  # "reynolds" or "alpha"
    values: tuple


def _typed(table, key, kinds, label):
    value = table[key]
    if isinstance(value, bool) and bool not in kinds:
        raise ConfigError(f"{label} must be a number, got a boolean")
    if not isinstance(value, kinds):
        want = "a boolean" if kinds == (bool,) else "a number"
        raise ConfigError(f"{label} must be {want}, got {value!r}")
    return value


def _number(table, key, label=None):
    return float(_typed(table, key, (int, float), label or key))


def _integer(table, key, label=None):
    return int(_typed(table, key, (int,), label or key))


def _validate(cfg: RunConfig) -> RunConfig:
    if not 0.0 <= cfg.delta < 1.0:
        raise ConfigError("delta must lie in [0,1)")
    if cfg.reynolds < 0.0:
        raise ConfigError("reynolds must be nonnegative")
    if cfg.pstar <= 0.0:
        raise ConfigError("pstar must be positive")
    if cfg.nr < 2:
        raise ConfigError("nr must be at least 2")
    if cfg.ntheta < 4:
        raise ConfigError("ntheta must be at least 4")
    if cfg.tol <= 0.0:
        raise ConfigError("tol must be positive")
    if cfg.max_iter < 1:
        raise ConfigError("max_iter must be at least 1")
    if cfg.quad_degree < 1:
        raise ConfigError("quad_degree must be at least 1")
    if cfg.census_epsilon <= 0.0:
        raise ConfigError("census_epsilon must be positive")
    c = cfg.continuation
    if c.d_re <= 0.0:
        raise ConfigError("continuation.d_re must be positive")
    if c.d_alpha <= 0.0:
        raise ConfigError("continuation.d_alpha must be positive")
    if c.max_halvings < 0:
        raise ConfigError("continuation.max_halvings must be nonnegative")
    return cfg


_TOP_KEYS = {"delta", "reynolds", "alpha", "pstar", "nr", "ntheta", "tol",
             "max_iter", "quad_degree", "census_epsilon", "out_dir",
             "continuation", "sweep"}
_CONT_KEYS = {"enabled", "d_re", "d_alpha", "max_halvings"}
_SWEEP_KEYS = {"parameter", "values", "start", "stop", "step"}


def _parse_continuation(table) -> ContinuationConfig:
    for key in table:
        if key not in _CONT_KEYS:
            raise ConfigError(f"unknown key 'continuation.{key}'")
    out = ContinuationConfig()
    if "enabled" in table:
        out = replace(out, enabled=_typed(table, "enabled", (bool,),
                                          "continuation.enabled"))
    if "d_re" in table:
        out = replace(out, d_re=_number(table, "d_re", "continuation.d_re"))
    if "d_alpha" in table:
        out = replace(out, d_alpha=_number(table, "d_alpha",
                                           "continuation.d_alpha"))
    if "max_halvings" in table:
        out = replace(out, max_halvings=_integer(table, "max_halvings",
                                                 "continuation.max_halvings"))
    return out


def _parse_sweep(table) -> SweepSpec:
    for key in table:
        if key not in _SWEEP_KEYS:
            raise ConfigError(f"unknown key 'sweep.{key}'")
    if "parameter" not in table:
        raise ConfigError("sweep.parameter is required")
    parameter = table["parameter"]
    if parameter not in ("reynolds", "alpha"):
        raise ConfigError("sweep.parameter must be 'reynolds' or 'alpha'")
    has_list = "values" in table
    has_range = any(k in table for k in ("start", "stop", "step"))
    if has_list == has_range:
        raise ConfigError("sweep needs either values or start/stop/step")
    if has_list:
        raw = table["values"]
        if not isinstance(raw, list) or not raw:
            raise ConfigError("sweep.values must be a non-empty list")
        values = []
        for i, v in enumerate(raw):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"sweep.values[{i}] must be a number")
            values.append(float(v))
    else:
        for k in ("start", "stop", "step"):
            if k not in table:
                raise ConfigError(f"sweep.{k} is required with a range sweep")
        start = _number(table, "start", "sweep.start")
        stop = _number(table, "stop", "sweep.stop")
        step = _number(table, "step", "sweep.step")
        if step == 0.0 or (stop - start) * step < 0.0:
            raise ConfigError("sweep.step must advance start towards stop")
        n = int(round((stop - start) / step))
        if abs(start + n * step - stop) > 1e-9 * max(1.0, abs(stop)):
            raise ConfigError("sweep.step must divide the range evenly")
        values = [start + k * step for k in range(n + 1)]
    if parameter == "reynolds" and any(v < 0.0 for v in values):
        raise ConfigError("sweep.values must be nonnegative for reynolds")
    return SweepSpec(parameter, tuple(values))


def parse_config(path):
    """Read a TOML config; unknown keys and domain violations are rejected."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}")

    for key in data:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key '{key}'")
    cfg = RunConfig()
    for key in ("delta", "reynolds", "alpha", "pstar", "tol",
                "census_epsilon"):
        if key in data:
            cfg = replace(cfg, **{key: _number(data, key)})
    for key in ("nr", "ntheta", "max_iter", "quad_degree"):
        if key in data:
            cfg = replace(cfg, **{key: _integer(data, key)})
    if "out_dir" in data:
        if not isinstance(data["out_dir"], str):
            raise ConfigError("out_dir must be a string")
        cfg = replace(cfg, out_dir=data["out_dir"])
    if "continuation" in data:
        if not isinstance(data["continuation"], dict):
            raise ConfigError("continuation must be a table")
        cfg = replace(cfg, continuation=_parse_continuation(data["continuation"]))
    sweep = None
    if "sweep" in data:
        if not isinstance(data["sweep"], dict):
            raise ConfigError("sweep must be a table")
        sweep = _parse_sweep(data["sweep"])
    return _validate(cfg), sweep


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.nr is not None:
        cfg = replace(cfg, nr=args.nr)
    if args.ntheta is not None:
        cfg = replace(cfg, ntheta=args.ntheta)
    if args.tol is not None:
        cfg = replace(cfg, tol=args.tol)
    if args.out_dir is not None:
        cfg = replace(cfg, out_dir=args.out_dir)
    return _validate(cfg)


def _load_config(args):
    if args.config is not None:
        cfg, sweep = parse_config(args.config)
    else:
        cfg, sweep = RunConfig(), None
    return _apply_overrides(cfg, args), sweep


# ------------------------------------------------------------------ solving

def _flow_params(cfg: RunConfig) -> FlowParams:
    return FlowParams(delta=cfg.delta, reynolds=cfg.reynolds, alpha=cfg.alpha,
                      pstar=cfg.pstar)


def _solve_point(mesh, params, cfg, ws, init, cold):
    """One parameter point: warm continuation unless disabled or cold.

    Returns (state, iterations, converged, residual); state is the last
    converged state, possibly at earlier parameters when the march failed.
    """
    if cold:
        init = None
    if not cfg.continuation.enabled:
        state, report = fixed_point(mesh, params, init=init, tol=cfg.tol,
                                    max_iter=cfg.max_iter,
                                    quad_degree=cfg.quad_degree, workspace=ws)
        return (state if report.converged else init, report.iterations,
                report.converged, report.residuals[-1])
    start = (init.params.reynolds, init.params.alpha) if init is not None \
        else (0.0, 0.0)
    if init is not None and start == (params.reynolds, params.alpha):
        return init, 0, True, 0.0
    schedule = ContinuationSchedule.build(
        params.reynolds, params.alpha, start=start,
        re_step=cfg.continuation.d_re, alpha_step=cfg.continuation.d_alpha,
        max_halvings=cfg.continuation.max_halvings)
    state, records = continuation_solve(mesh, params, schedule=schedule,
                                        init=init, tol=cfg.tol,
                                        max_iter=cfg.max_iter,
                                        quad_degree=cfg.quad_degree,
                                        workspace=ws)
    spent = sum(r.iterations for r in records)
    converged = bool(records) and records[-1].converged
    residual = records[-1].residual if records else 0.0
    return state, spent, converged, residual


def _result_row(params, cfg, iterations, converged, residual, ext, census):
    row = {
        "delta": params.delta, "reynolds": params.reynolds,
        "alpha": params.alpha, "pstar": params.pstar,
        "nr": cfg.nr, "ntheta": cfg.ntheta,
        "iterations": iterations, "converged": converged,
        "residual": residual,
    }
    nan = float("nan")
    if ext is not None:
        row.update(psi_min=ext.psi_min, psi_max=ext.psi_max,
                   r_min=ext.psi_min_loc[0], theta_min=ext.psi_min_loc[1],
                   r_max=ext.psi_max_loc[0], theta_max=ext.psi_max_loc[1],
                   w_max=ext.w_max)
    else:
        row.update(psi_min=nan, psi_max=nan, r_min=nan, theta_min=nan,
                   r_max=nan, theta_max=nan, w_max=nan)
    if census is not None:
        row.update(pos_vortices=census.positive, neg_vortices=census.negative)
    else:
        row.update(pos_vortices=0, neg_vortices=0)
    return row


def _probe_state(mesh, state, cfg):
    psi = recover_stream_function(mesh, state.u, state.v, state.params.delta,
                                  cfg.quad_degree)
    ext = extrema(psi, state.w)
    census = vortex_census(mesh, psi, threshold=cfg.census_epsilon)
    return psi, ext, census


def _write_state_vtk(path, mesh, state, psi):
    point_data = {"u": state.u.values, "v": state.v.values,
                  "w": state.w.values, "psi": psi.values}
    cell_data = {
        f"sigma{k + 1}":
            state.sigma[k].values[state.sigma[k].dofmap.element_nodes].mean(axis=1)
        for k in range(3)
    }
    p = state.params
    title = (f"delta={p.delta:.9g} reynolds={p.reynolds:.9g} "
             f"alpha={p.alpha:.9g} pstar={p.pstar:.9g}")
    export_vtk(path, mesh, point_data, cell_data, title)


# ------------------------------------------------------------------ commands

def cmd_run(args) -> int:
    cfg, _ = _load_config(args)
    params = _flow_params(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    mesh = build_mesh(cfg.nr, cfg.ntheta)
    ws = Workspace(mesh, params, cfg.quad_degree)
    try:
        state, iterations, converged, residual = _solve_point(
            mesh, params, cfg, ws, init=None, cold=args.cold)
    except (RuntimeError, FloatingPointError) as exc:
        print(f"error: solver: {exc}", file=sys.stderr)
        return EXIT_SOLVER

    ext = census = None
    if state is not None:
        psi, st_ext, st_census = _probe_state(mesh, state, cfg)
        _write_state_vtk(os.path.join(cfg.out_dir, "state.vtk"), mesh, state, psi)
        if converged:
            ext, census = st_ext, st_census
    export_csv(os.path.join(cfg.out_dir, "result.csv"),
               [_result_row(params, cfg, iterations, converged, residual,
                            ext, census)])
    if not converged:
        print(f"error: convergence: no converged state at reynolds="
              f"{params.reynolds:g}, alpha={params.alpha:g} "
              f"(partial outputs written)", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, sweep = _load_config(args)
    if sweep is None:
        raise ConfigError("sweep command requires a [sweep] table in the config")
    base = _flow_params(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    mesh = build_mesh(cfg.nr, cfg.ntheta)
    ws = Workspace(mesh, base, cfg.quad_degree)

    rows = []
    state = None
    failed = 0
    for idx, value in enumerate(sweep.values):
        point = replace(base, **{sweep.parameter: value})
        try:
            result, iterations, converged, residual = _solve_point(
                mesh, point, cfg, ws, init=state, cold=args.cold)
        except (RuntimeError, FloatingPointError):
            result, iterations, converged, residual = state, 0, False, float("nan")
        ext = census = None
        if converged:
            state = result
            psi, ext, census = _probe_state(mesh, state, cfg)
            if args.write_vtk_per_point:
                _write_state_vtk(os.path.join(cfg.out_dir, f"state_{idx:03d}.vtk"),
                                 mesh, state, psi)
        else:
            failed += 1
            if result is not None:
                state = result  # keep the furthest converged state for warmth
        rows.append(_result_row(point, cfg, iterations, converged, residual,
                                ext, census))
    export_csv(os.path.join(cfg.out_dir, "results.csv"), rows)
    if failed:
        print(f"error: convergence: {failed} of {len(sweep.values)} sweep "
              f"points failed", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


# ---------------------------------------------------------------- validation

def _check_metric_identities():
    from .calculus import ElementBasis
    from .geometry import P2, reference_quadrature
    from .stokes import geometry_factors

    mesh = build_mesh(8, 24)
    rule = reference_quadrature(6)
    basis = ElementBasis(mesh, P2, rule.points)
    rr, tt = basis.points[..., 0], basis.points[..., 1]
    r, B, B1, B2, rB = geometry_factors(basis, 0.3)
    err = max(np.abs(r - rr).max(),
              np.abs(B - (1 + 0.3 * rr * np.cos(tt))).max(),
              np.abs(B1 - 0.3 * rr * np.sin(tt)).max(),
              np.abs(B2 - 0.3 * rr * np.cos(tt)).max(),
              np.abs(B - (1 + B2)).max(),
              np.abs(rB - r * B).max(),
              np.abs(B1 ** 2 + B2 ** 2 - (0.3 * rr) ** 2).max())
    return err <= 1e-13, f"max defect {err:.2e}"


def _check_quadrature_exactness():
    from .geometry import reference_quadrature

    rule = reference_quadrature(6)
    x, y = rule.points[:, 0], rule.points[:, 1]
    err = 0.0
    for a in range(7):
        for b in range(7 - a):
            exact = (math.factorial(a) * math.factorial(b)
                     / math.factorial(a + b + 2))
            err = max(err, abs(float(rule.weights @ (x ** a * y ** b)) - exact)
                      / exact)
    return err <= 1e-13, f"max relative defect {err:.2e}"


def _check_cartesian_oracle():
    import sympy as sym

    from .calculus import AnalyticField, cartesian_residual

    R, T = sym.symbols("r t", real=True)
    s = T / (2 * sym.pi)
    f = AnalyticField(
        sym.Rational(3, 10) * R ** 2 + sym.Rational(1, 10) * R * s,
        sym.Rational(1, 5) * R ** 3 * s - sym.Rational(1, 2) * R * s ** 2,
        sym.Rational(7, 10) * R ** 2 * s + sym.Rational(1, 4) * s ** 3,
        sym.Rational(1, 3) * R * s + sym.Rational(2, 5) * R ** 2,
        symbols=(R, T))
    worst = 0.0
    for params, pt in ((FlowParams(0.2, 2.0, 0.1), (0.5, 1.0)),
                       (FlowParams(0.2, 2.0, 0.1), (0.3, 4.0)),
                       (FlowParams(0.0, 3.0, -0.2), (0.7, 2.5))):
        worst = max(worst, cartesian_residual(f, pt, params))
    return worst <= 1e-6, f"worst residual {worst:.2e}"


def _check_poiseuille():
    from .geometry import AXIS_COLLAPSE, P2, build_dof_map
    from .stokes import AxialSystem

    mesh = build_mesh(8, 24)
    dm_w = build_dof_map(mesh, P2, AXIS_COLLAPSE)
    ax = AxialSystem(mesh, dm_w, FlowParams(0.0, 0.0, 0.0))
    w = ax.solve()
    err = float(np.abs(w.values - (1 - dm_w.node_coords[:, 0] ** 2)).max())
    return err <= 1e-10, f"max nodal error {err:.2e}"


def _check_transport_round_trip():
    from .geometry import P2, DiscreteField, build_dof_map
    from .transport import assemble_transport, solve_transport

    mesh = build_mesh(8, 24)
    dm = build_dof_map(mesh, P2)
    r = dm.node_coords[:, 0]
    u = DiscreteField(dm, np.zeros(dm.n_nodes))
    v = DiscreteField(dm, r * (1 - r))
    tm = assemble_transport(mesh, u, v, 0.7, 0.2)
    rng = np.random.default_rng(7)
    sstar = rng.normal(size=3 * mesh.n_cells)
    back, = solve_transport(tm, [tm.matrix @ sstar])
    err = float(np.abs(back.values - sstar).max())
    return err <= 1e-10, f"max round-trip error {err:.2e}"


def _check_mms_rates(shapes=((8, 24), (16, 48), (32, 96))):
    import sympy as sym

    from .calculus import ElementBasis, evaluate
    from .geometry import (AXIS_COLLAPSE, AXIS_TRIG, P1, P2, build_dof_map,
                           reference_quadrature)
    from .stokes import AxialSystem, SaddleSystem, assemble_load

    delta = 0.2
    r, t = sym.symbols("r theta")
    d = sym.Float(delta)
    B = 1 + r * d * sym.cos(t)
    B1 = r * d * sym.sin(t)
    B2 = r * d * sym.cos(t)
    rB = r * B
    g = r * (1 + r) * sym.sin(t) * sym.cos(t)
    u = r * (1 - r) * sym.sin(t) * g
    v = r * (1 - r) * sym.cos(t) * g
    p = r * sym.cos(t)
    w = (1 - r ** 2) * (1 + r * sym.cos(t) / 2)

    def strong_a(f):
        return (-(rB) ** 2 * sym.diff(f, r, 2) - B ** 2 * sym.diff(f, t, 2)
                - rB * (B + B2) * sym.diff(f, r) + B * B1 * sym.diff(f, t))

    f1 = (strong_a(u) + (B ** 2 + B2 ** 2) * u - B1 * (B + B2) * v
          + 2 * B ** 2 * sym.diff(v, t) + rB ** 2 * sym.diff(p, r))
    f2 = (strong_a(v) + (B ** 2 + B1 ** 2) * v + B1 * u
          - 2 * B ** 2 * sym.diff(u, t) + r * B ** 2 * sym.diff(p, t))
    gstar = sym.diff(rB * u, r) + sym.diff(B * v, t)
    f3 = strong_a(w) + (r * d) ** 2 * w
    fn = {k: sym.lambdify((r, t), e, "numpy")
          for k, e in (("f1", f1), ("f2", f2), ("g", gstar), ("f3", f3),
                       ("u", u), ("v", v), ("p", p), ("w", w))}

    params = FlowParams(delta, 0.0, 0.0)
    rule = reference_quadrature(6)
    errs = []
    for nr, nt in shapes:
        mesh = build_mesh(nr, nt)
        dm_uv = build_dof_map(mesh, P2, AXIS_TRIG)
        dm_p = build_dof_map(mesh, P1, AXIS_COLLAPSE)
        dm_w = build_dof_map(mesh, P2, AXIS_COLLAPSE)
        b2 = ElementBasis(mesh, P2, rule.points)
        b1 = ElementBasis(mesh, P1, rule.points)
        rr, tt = b2.points[..., 0], b2.points[..., 1]
        wd = rule.weights[None, :] * b2.det[:, None]
        sys_ = SaddleSystem(mesh, dm_uv, dm_p, params)
        uv, ph = sys_.solve(assemble_load(mesh, dm_uv, fn["f1"](rr, tt)),
                            assemble_load(mesh, dm_uv, fn["f2"](rr, tt)),
                            assemble_load(mesh, dm_p, fn["g"](rr, tt)))
        ax = AxialSystem(mesh, dm_w, params)
        wh = ax.solve(extra_full=assemble_load(mesh, dm_w, fn["f3"](rr, tt)),
                      include_pstar=False)

        def l2(basis, conn, nodal, exact):
            diff = evaluate(basis, conn, nodal) - exact
            return float(np.sqrt(np.einsum("cq,cq->", wd, diff ** 2)))

        errs.append([l2(b2, dm_uv.element_nodes, uv.component(0), fn["u"](rr, tt)),
                     l2(b2, dm_uv.element_nodes, uv.component(1), fn["v"](rr, tt)),
                     l2(b1, dm_p.element_nodes, ph.values, fn["p"](rr, tt)),
                     l2(b2, dm_w.element_nodes, wh.values, fn["w"](rr, tt))])
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:])).min(axis=0)
    ok = (rates[0] >= 2.7 and rates[1] >= 2.7 and rates[2] >= 1.7
          and rates[3] >= 2.7)
    return ok, (f"rates u={rates[0]:.2f} v={rates[1]:.2f} "
                f"p={rates[2]:.2f} w={rates[3]:.2f}")


def _check_newtonian_symmetry():
    mesh = build_mesh(16, 48)
    params = FlowParams(0.2, 5.0, 0.0)
    state, report = fixed_point(mesh, params)
    if not report.converged:
        return False, "fixed point did not converge"
    psi = recover_stream_function(mesh, state.u, state.v, params.delta)
    lo, hi = float(psi.values.min()), float(psi.values.max())
    defect = abs(hi + lo) / max(abs(hi), abs(lo))
    return defect <= 1e-6, f"|psi_max+psi_min| relative defect {defect:.2e}"


FAST_CHECKS = (
    ("metric identities", _check_metric_identities),
    ("quadrature exactness", _check_quadrature_exactness),
    ("cartesian oracle", _check_cartesian_oracle),
    ("poiseuille", _check_poiseuille),
    ("transport round trip", _check_transport_round_trip),
)
FULL_CHECKS = (
    ("mms convergence rates", _check_mms_rates),
    ("newtonian symmetry", _check_newtonian_symmetry),
)


def cmd_validate(args) -> int:
    checks = FAST_CHECKS + (FULL_CHECKS if args.level == "full" else ())
    width = max(len(name) for name, _ in checks)
    failures = 0
    for name, check in checks:
        try:
            ok, detail = check()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {exc!r}"
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    if failures:
        print(f"error: validation: {failures} of {len(checks)} checks failed",
              file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


# --------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: config: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="curvedpipe",
                     description="Finite-element solver for steady fully "
                                 "developed second-grade flows in curved pipes")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML configuration")
    common.add_argument("--out-dir", metavar="PATH",
                        help="output directory (default from config)")
    common.add_argument("--nr", type=int, help="radial subdivisions")
    common.add_argument("--ntheta", type=int, help="angular subdivisions")
    common.add_argument("--tol", type=float, help="fixed-point tolerance")
    common.add_argument("--cold", action="store_true",
                        help="solve each point from a zero initial state")

    p_run = sub.add_parser("run", parents=[common],
                           help="solve one parameter point, write "
                                "state.vtk and result.csv")
    p_run.set_defaults(handler=cmd_run)

    p_sweep = sub.add_parser("sweep", parents=[common],
                             help="march the [sweep] values with warm "
                                  "starts, write results.csv")
    p_sweep.add_argument("--write-vtk-per-point", action="store_true",
                         help="also write state_NNN.vtk per sweep point")
    p_sweep.set_defaults(handler=cmd_sweep)

    p_val = sub.add_parser("validate", help="run the numerical check suite")
    p_val.add_argument("level", nargs="?", choices=("fast", "full"),
                       default="fast")
    p_val.set_defaults(handler=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
