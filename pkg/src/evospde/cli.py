"""Command-line driver: scenario configuration, runs, and result files.

Scenarios are INI files (see ``scenarios/lip1.cfg``).  Every key must be
known; hypothesis violations are reported with the tag of the condition
they break and exit status 2.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
import time
from importlib import resources
from pathlib import Path as FsPath
from typing import Optional, Sequence

import numpy as np

from .analysis import CHECKS, MIN_HOLDER_MEMBERS, Scenario, run_ensemble
from .elliptic import OperatorFamily, at1_probe, at2_probe, default_time_pairs
from .errors import ConfigError, DomainError, SPDEError
from .mesh import SpaceGrid, write_csv
from .noise import DEFAULT_TRUNCATION, check_cond_linfty, make_model, validate_lq
from .solver import PicardConfig, ProblemSpec

log = logging.getLogger(__name__)

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

SCHEMA = {
    "scenario": {"name"},
    "operator": {"family", "epsilon", "a", "a0", "mu", "nu", "kappa", "w"},
    "noise": {"gamma", "n", "regime", "q", "beta"},
    "nonlinearity": {"f", "f_scale", "g", "g_scale", "lipschitz", "theta_f", "theta_b", "a", "n_levels"},
    "initial": {"u0", "amplitude"},
    "grid": {"n_cells", "m_steps", "substeps", "t", "scheme"},
    "run": {"m", "r", "p_weight", "seed", "tol", "max_iter"},
    "checks": {"ids", "holder_lags", "holder_norm", "holder_window",
               "factorization_n_cells", "factorization_steps", "factorization_members",
               "factorization_alpha", "factorization_substeps",
               "maxreg_n_cells", "maxreg_steps", "maxreg_members",
               "variational_n_cells", "variational_steps", "variational_members", "at_n_cells"},
}

F_MAPS = {
    "zero": (lambda c: lambda t, s, u: np.zeros_like(u), True),
    "linear": (lambda c: lambda t, s, u: c * u, True),
    "sine": (lambda c: lambda t, s, u: c * np.sin(u), True),
    "square": (lambda c: lambda t, s, u: c * u**2, False),
    "cube": (lambda c: lambda t, s, u: c * u**3, False),
}
G_MAPS = {
    "zero": (lambda c: lambda t, s, u: np.zeros_like(u), True),
    "one": (lambda c: lambda t, s, u: np.full_like(u, c), True),
    "linear": (lambda c: lambda t, s, u: c * u, True),
    "sqrt1p": (lambda c: lambda t, s, u: c * np.sqrt(1.0 + u**2), True),
    "square": (lambda c: lambda t, s, u: c * u**2, False),
}
INITIAL = {
    "zero": lambda s: np.zeros_like(s),
    "constant": lambda s: np.ones_like(s),
    "cospi": lambda s: np.cos(np.pi * s),
    "step": lambda s: (s < 0.5).astype(float),
}


def _scenario_file(name_or_path: str) -> str:
    """Read a config from a path, or from the bundled scenarios by name."""
    if os.path.exists(name_or_path):
        with open(name_or_path) as fh:
            return fh.read()
    stem = FsPath(name_or_path).stem
    try:
        return resources.files("evospde.scenarios").joinpath(f"{stem}.cfg").read_text()
    except (FileNotFoundError, ModuleNotFoundError) as exc:
        raise ConfigError(f"no config file or bundled scenario named {name_or_path!r}") from exc


def parse_config(text: str, overrides: Sequence[str] = ()) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option, value.strip())
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        extra = set(cp.options(section)) - SCHEMA[section]
        if extra:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(extra))}")
    return cp


def _get(cp, section, key, conv=str, default=None):
    if not cp.has_option(section, key):
        if default is None:
            raise ConfigError(f"missing required key {section}.{key}")
        return default
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from exc


def _int_list(raw: str) -> list:
    return [int(x) for x in raw.replace(",", " ").split()]


def _float_list(raw: str) -> list:
    return [float(x) for x in raw.replace(",", " ").split()]


def build_operator(cp) -> OperatorFamily:
    family = _get(cp, "operator", "family", str, "lip1")
    mu = _get(cp, "operator", "mu", float, 1.0)
    nu = _get(cp, "operator", "nu", float, 1.0)
    if not 0.5 < mu <= 1:
        raise ConfigError(f"mu = {mu} must lie in (1/2, 1]: coefficient time regularity (AT2)")
    if not 0 < nu <= 1 or not mu + nu > 1:
        raise ConfigError(f"nu = {nu} must lie in (0, 1] with mu + nu > 1 (AT2)")
    a0 = _get(cp, "operator", "a0", float, 0.0)
    w_raw = _get(cp, "operator", "w", str, "auto")
    w = None if w_raw == "auto" else float(w_raw)
    if family == "lip1":
        eps = _get(cp, "operator", "epsilon", float, 0.5)
        if eps < 0:
            raise ConfigError("operator.epsilon must be nonnegative (AT1)")
        kappa = _get(cp, "operator", "kappa", float, 1.0)
        if kappa > 1:
            raise ConfigError(f"kappa = {kappa} exceeds min a = 1 (AT1)")

        def a(t, s, eps=eps, mu=mu):
            return 1.0 + eps * t**mu * (1.0 + 0.5 * np.cos(2 * np.pi * np.asarray(s)))

        return OperatorFamily(a=a, a0=a0, mu=mu, nu=nu, kappa=kappa, w=w,
                              autonomous=eps == 0, name=f"lip1(epsilon={eps})")
    if family == "constant":
        value = _get(cp, "operator", "a", float, 1.0)
        if not value > 0:
            raise ConfigError(f"operator.a = {value} must be positive (AT1)")
        return OperatorFamily.constant(value, a0, mu=mu, nu=nu, w=w)
    if family == "zero":
        return OperatorFamily(a=None, a0=a0, mu=mu, nu=nu, w=w, autonomous=True, name="zero")
    raise ConfigError(f"unknown operator family {family!r}")


def build_noise(cp, n_cells: int):
    gamma = _get(cp, "noise", "gamma", float, 2.0)
    if not gamma > 0:
        raise ConfigError(f"noise.gamma = {gamma} must be positive (condCov)")
    if cp.has_option("noise", "n"):
        N = _get(cp, "noise", "n", int)
        if not 1 <= N < n_cells:
            raise ConfigError(f"noise.N = {N} must lie in [1, n_cells) for orthonormal grid modes (condCov)")
    else:
        N = min(DEFAULT_TRUNCATION, n_cells - 1)
    regime = _get(cp, "noise", "regime", str, "Linf")
    if regime == "Linf":
        model = make_model(gamma, N, regime="Linf")
        chk = check_cond_linfty(model)
        if not chk["pass"]:
            raise ConfigError(
                f"sum lam_n ||e_n||_inf^2 does not settle (tail {chk['tail']:.3g} of {chk['sum']:.3g}); "
                "the L^infty covariance condition fails (condCov)")
        return model
    if regime == "Lq":
        q = _get(cp, "noise", "q", float)
        beta = _get(cp, "noise", "beta", float)
        try:
            validate_lq(q, beta)
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc
        return make_model(gamma, N, regime="Lq", q=q, beta=beta)
    raise ConfigError(f"unknown covariance regime {regime!r} (condCov/condCovb)")


def _nonlinearity(table, kind, cp, key, scale_key, mode):
    name = _get(cp, "nonlinearity", key, str, "zero")
    if name not in table:
        raise ConfigError(f"unknown {kind} id {name!r}; known: {', '.join(sorted(table))}")
    make, global_lip = table[name]
    tag = "(H2)" if kind == "f" else "(H3)"
    if mode == "global" and not global_lip:
        raise ConfigError(f"{kind} = {name!r} is not globally Lipschitz {tag}; set lipschitz = local")
    return make(_get(cp, "nonlinearity", scale_key, float, 1.0))


def load_scenario(source: str, overrides: Sequence[str] = (), seed: Optional[int] = None) -> Scenario:
    """Parse and validate a scenario from a path or bundled name."""
    cp = parse_config(_scenario_file(source), overrides)
    name = _get(cp, "scenario", "name", str, FsPath(source).stem)
    n_cells = _get(cp, "grid", "n_cells", int, 64)
    T = _get(cp, "grid", "t", float, 1.0)
    if n_cells < 4 or not T > 0:
        raise ConfigError("grid needs n_cells >= 4 and T > 0")
    fam = build_operator(cp)
    noise = build_noise(cp, n_cells)
    mode = _get(cp, "nonlinearity", "lipschitz", str, "global")
    if mode not in ("global", "local"):
        raise ConfigError(f"nonlinearity.lipschitz must be global or local, got {mode!r}")
    f = _nonlinearity(F_MAPS, "f", cp, "f", "f_scale", mode)
    g = _nonlinearity(G_MAPS, "g", cp, "g", "g_scale", mode)
    u0_id = _get(cp, "initial", "u0", str, "cospi")
    if u0_id not in INITIAL:
        raise ConfigError(f"unknown initial value id {u0_id!r}; known: {', '.join(sorted(INITIAL))}")
    grid = SpaceGrid(n_cells)
    u0 = grid.field(_get(cp, "initial", "amplitude", float, 1.0) * INITIAL[u0_id](grid.nodes))
    theta_F = _get(cp, "nonlinearity", "theta_f", float, 0.0)
    theta_B = _get(cp, "nonlinearity", "theta_b", float, 0.0)
    a = _get(cp, "nonlinearity", "a", float, 0.0)
    if not a + theta_F < 1:
        raise ConfigError(f"a + theta_F = {a + theta_F} >= 1 violates (H2)")
    if not a + theta_B < 0.5:
        raise ConfigError(f"a + theta_B = {a + theta_B} >= 1/2 violates (H3)")
    try:
        ps = ProblemSpec(fam, noise, f, g, u0, T, theta_F, theta_B, a,
                         lipschitz={"mode": mode}, name=name)
        p_raw = _get(cp, "run", "p_weight", str, "auto")
        cfg = PicardConfig(
            r=_get(cp, "run", "r", float, 4.0),
            p_weight=p_raw if p_raw == "auto" else float(p_raw),
            max_iter=_get(cp, "run", "max_iter", int, 100),
            tol=_get(cp, "run", "tol", float, 1e-10),
            M=_get(cp, "run", "m", int, 100),
            seed=_get(cp, "run", "seed", int, 0) if seed is None else int(seed),
            m_steps=_get(cp, "grid", "m_steps", int, 256),
            substeps=_get(cp, "grid", "substeps", int, 4),
            scheme=_get(cp, "grid", "scheme", str, "backward-euler"))
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.r == 2 and (theta_F > 0 or theta_B > 0):
        raise ConfigError("r = 2 needs theta_F = theta_B = 0 (H2)/(H3)")
    ids = _get(cp, "checks", "ids", str, "").replace(",", " ").split()
    options = _check_options(cp)
    options["n_levels"] = _get(cp, "nonlinearity", "n_levels", int, 8)
    return Scenario(name, ps, cfg, ids, options)


def _check_options(cp) -> dict:
    opts = {}
    kinds = {"holder_lags": _int_list, "holder_norm": str, "holder_window": _float_list,
             "factorization_steps": _int_list, "factorization_alpha": float,
             "maxreg_steps": int, "variational_steps": _int_list}
    for key in SCHEMA["checks"] - {"ids"}:
        if cp.has_option("checks", key):
            opts[key] = _get(cp, "checks", key, kinds.get(key, int))
    return opts


# -- output -------------------------------------------------------------------

def output_dir(args, scenario: str) -> FsPath:
    tag = args.tag or time.strftime("%Y%m%d-%H%M%S")
    out = FsPath(args.out) / scenario / tag
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_report(out: FsPath, report) -> FsPath:
    path = out / "report.json"
    path.write_text(report.to_json())
    return path


def write_paths(out: FsPath, sc: Scenario, values: np.ndarray, count: int) -> None:
    pdir = out / "paths"
    pdir.mkdir(exist_ok=True)
    times = sc.config.tgrid(sc.problem.T).times
    for i in range(min(count, values.shape[0])):
        write_csv(pdir / f"member{i:04d}.csv", times, values[i])


def _print_flags(report) -> None:
    for cid, ok in report.flags.items():
        print(f"check {cid}: {'PASS' if ok else 'FAIL'}")


# -- subcommands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    sc = load_scenario(args.config, args.set, args.seed)
    report = run_ensemble(sc, workers=args.workers, solve=True)
    out = output_dir(args, sc.name)
    write_report(out, report)
    write_paths(out, sc, report.solution, args.paths)
    _print_flags(report)
    print(f"report: {out / 'report.json'}")
    return EXIT_PASS if report.passed else EXIT_FAIL


def cmd_verify(args) -> int:
    if not args.ids:
        print("verify: at least one check id is required", file=sys.stderr)
        return EXIT_CONFIG
    unknown = [c for c in args.ids if c not in CHECKS]
    if unknown:
        print(f"verify: unknown check id(s) {', '.join(unknown)}; known: {', '.join(sorted(CHECKS))}",
              file=sys.stderr)
        return EXIT_CONFIG
    sc = load_scenario(args.config, args.set, args.seed)
    if "holder" in args.ids and sc.config.M < MIN_HOLDER_MEMBERS:
        print(f"verify: holder needs an ensemble of at least {MIN_HOLDER_MEMBERS} members "
              f"(run.M = {sc.config.M})", file=sys.stderr)
        return EXIT_CONFIG
    sc.checks = list(args.ids)
    report = run_ensemble(sc, workers=args.workers)
    write_report(output_dir(args, sc.name), report)
    _print_flags(report)
    return EXIT_PASS if report.passed else EXIT_FAIL


def cmd_probe_at(args) -> int:
    sc = load_scenario(args.config, args.set, args.seed)
    fam, T = sc.problem.fam, sc.problem.T
    grid = SpaceGrid(int(sc.opt("at_n_cells", min(sc.problem.grid.n_cells, 32))))
    if args.refine < 2:
        print("probe-at: --refine must be at least 2", file=sys.stderr)
        return EXIT_CONFIG
    r1 = at1_probe(fam, grid, list(np.linspace(0.0, T, 5)), refine=args.refine)
    r2 = at2_probe(fam, grid, default_time_pairs(T), refine=args.refine)
    pdir = output_dir(args, sc.name) / "probes"
    pdir.mkdir(exist_ok=True)
    for rep, fname in ((r1, "at1.json"), (r2, "at2.json")):
        (pdir / fname).write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"AT1: K_est={r1.K_est:.6g} stability={r1.stability_ratio:.4g} {'PASS' if r1.passed else 'FAIL'}")
    print(f"AT2: L_est={r2.L_est:.6g} stability={r2.stability_ratio:.4g} {'PASS' if r2.passed else 'FAIL'}")
    return EXIT_PASS if r1.passed and r2.passed else EXIT_FAIL


def cmd_regularity(args) -> int:
    sc = load_scenario(args.config, args.set, args.seed)
    if sc.config.M < MIN_HOLDER_MEMBERS:
        print(f"regularity: holder needs an ensemble of at least {MIN_HOLDER_MEMBERS} members",
              file=sys.stderr)
        return EXIT_CONFIG
    sc.checks = ["holder", "sobolev"]
    report = run_ensemble(sc, workers=args.workers, solve=True)
    write_report(output_dir(args, sc.name), report)
    e = report.exponents["time"]
    print(f"time Hoelder exponent {e['est']:.4f} (90% CI {e['lo']:.4f} .. {e['hi']:.4f})")
    _print_flags(report)
    return EXIT_PASS if report.passed else EXIT_FAIL


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    """Flags accepted before and after the subcommand; subcommand copies never reset them."""
    p = argparse.ArgumentParser(add_help=False)

    def default(value):
        return argparse.SUPPRESS if suppress else value

    p.add_argument("--config", default=default("lip1"), help="config path or bundled scenario name")
    p.add_argument("--out", default=default("out"), help="output root directory")
    p.add_argument("--seed", type=int, default=default(None), help="override run.seed")
    p.add_argument("--workers", type=int, default=default(os.cpu_count() or 1))
    p.add_argument("--tag", default=default(None), help="output subdirectory (default: timestamp)")
    p.add_argument("--set", action="append", default=default([]), metavar="SECTION.KEY=VALUE",
                   help="override one config value")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evospde", parents=[_global_flags(False)],
                                     description="Stochastic evolution equation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _global_flags(True)
    p = sub.add_parser("simulate", parents=[common], help="solve the scenario and run its checks")
    p.add_argument("--paths", type=int, default=1, help="number of member paths written as CSV")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("verify", parents=[common], help="run selected checks")
    p.add_argument("ids", nargs="*", help=f"check ids: {', '.join(sorted(CHECKS))}")
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("probe-at", parents=[common], help="resolvent and commutator probes")
    p.add_argument("--refine", type=int, default=2)
    p.set_defaults(func=cmd_probe_at)
    p = sub.add_parser("regularity", parents=[common], help="time Hoelder and Sobolev estimates")
    p.set_defaults(func=cmd_regularity)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SPDEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
