"""Command-line front end: config files, CSV artifacts, run manifests.

Config files are flat ``key = value`` text ("#" comments allowed); every key
has a documented default, and command-line flags override file values.  Each
subcommand writes a JSON manifest next to its CSV artifacts that records the
fully resolved configuration; re-running from the manifest on the same build
reproduces the CSVs byte for byte (all floats are emitted with 17 significant
digits, and all randomness flows from the three named seeds).

Exit codes: 0 success, 1 divergence (or failed self-check), 2 config/usage
error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from ._backend import BACKEND
from .experiment import (
    ExperimentConfig,
    balance_scaling_study,
    make_truth,
    run_twin,
    sweep,
)
from .obsmodel import generate_observations, make_observation_operator

__all__ = [
    "load_config",
    "resolve_config",
    "serialize_config",
    "emit_series_csv",
    "emit_sweep_csv",
    "write_manifest",
    "main",
]


class ConfigError(ValueError):
    """Bad config file or flag values (CLI exit code 2)."""


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_grid(s):
    if isinstance(s, (tuple, list)):
        return tuple(float(v) for v in s)
    vals = tuple(float(v) for v in s.split(",") if v.strip())
    if not vals:
        raise ValueError("empty grid")
    return vals


def _parse_opt_float(s):
    if s is None or (isinstance(s, str) and s.strip().lower() in ("none", "")):
        return None
    return float(s)


# key -> parser; defaults come from ExperimentConfig plus the run selectors
_EXP_KEYS = {
    "delta": float, "eps": float, "alpha": float, "gamma": float,
    "forcing": float, "n_grid": int, "m": int, "dt": float, "dt_obs": float,
    "cycles": int, "spinup_cycles": int, "obs_kind": str, "obs_r": float,
    "inflation_grid": _parse_grid, "localization_grid": _parse_grid,
    "inflation_applies_to": str, "seed_truth": int, "seed_obs": int,
    "seed_ens": int, "spread": float, "mollifier_eps": _parse_opt_float,
    "analysis_substeps": int, "stepper": str, "fp_tol": float,
    "truth_discard": float, "u0_mode": str,
}
_RUN_KEYS = {"scheme": str, "r0": float, "lambda": float}
_RUN_DEFAULTS = {"scheme": "menkf", "r0": 2.0, "lambda": 1.02}
_ALL_KEYS = {**_EXP_KEYS, **_RUN_KEYS}


def _parse_config_text(text, origin="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _ALL_KEYS[key](val)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def resolve_config(values):
    """Merge a key->value mapping over the defaults into validated configs.

    Returns (ExperimentConfig, scheme, r0, lambda); validation errors carry
    the offending field's name.
    """
    unknown = set(values) - set(_ALL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    exp_kwargs = {}
    for key, parse in _EXP_KEYS.items():
        if key in values and values[key] is not None:
            try:
                exp_kwargs[key] = parse(values[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
    try:
        cfg = ExperimentConfig(**exp_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    run = dict(_RUN_DEFAULTS)
    for key in _RUN_KEYS:
        if key in values and values[key] is not None:
            run[key] = _RUN_KEYS[key](values[key])
    return cfg, run["scheme"], float(run["r0"]), float(run["lambda"])


def load_config(path):
    """Load a config file into (ExperimentConfig, FilterConfig)."""
    with open(path, encoding="utf-8") as fh:
        values = _parse_config_text(fh.read(), origin=path)
    cfg, scheme, r0, lam = resolve_config(values)
    try:
        fcfg = cfg.filter_config(scheme, lam, r0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, fcfg


def serialize_config(cfg: ExperimentConfig, scheme=None, r0=None, lam=None):
    """Render the resolved configuration back to config-file text.

    Re-loading the result reproduces the configs exactly (round-trip).
    """
    lines = []
    for key in _EXP_KEYS:
        v = getattr(cfg, key)
        if isinstance(v, tuple):
            v = ",".join(repr(float(x)) for x in v)
        elif v is None:
            v = "none"
        lines.append(f"{key} = {v}")
    if scheme is not None:
        lines.append(f"scheme = {scheme}")
    if r0 is not None:
        lines.append(f"r0 = {float(r0)!r}")
    if lam is not None:
        lines.append(f"lambda = {float(lam)!r}")
    return "\n".join(lines) + "\n"


def _g17(v):
    return format(float(v), ".17g")


def emit_series_csv(result, path):
    """Per-cycle series CSV: cycle,t,rmse_x,rmse_h,imbalance,diverged.

    One row per completed cycle (diverged = 0); a diverged run appends a
    sentinel row for the cycle that tripped the guard, with NaN metrics and
    diverged = 1.  Byte-deterministic for a fixed RunResult.
    """
    lines = ["cycle,t,rmse_x,rmse_h,imbalance,diverged"]
    for j in range(result.n_cycles):
        lines.append(",".join([
            str(j + 1), _g17(result.cycle_times[j]), _g17(result.rmse_x[j]),
            _g17(result.rmse_h[j]), _g17(result.imbalance_cycle[j]), "0",
        ]))
    if result.diverged:
        lines.append(f"{result.diverged_cycle},nan,nan,nan,nan,1")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def emit_sweep_csv(rows, path):
    """Sweep table CSV, one row per (scheme, r0) cell."""
    lines = ["scheme,r0,best_lambda_x,best_rmse_x,best_lambda_h,best_rmse_h,diverged"]
    for row in rows:
        lines.append(",".join([
            row.scheme, _g17(row.r0), _g17(row.best_lambda_x),
            _g17(row.best_rmse_x), _g17(row.best_lambda_h),
            _g17(row.best_rmse_h), "1" if row.diverged else "0",
        ]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _emit_state_csv(header_fields, times, states, path, start_cycle=1):
    lines = [",".join(header_fields)]
    for j in range(len(times)):
        row = [str(start_cycle + j), _g17(times[j])]
        row.extend(_g17(v) for v in states[j])
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def write_manifest(path, command, cfg, run_keys, outputs, walltime,
                   diverged=False, diverged_cycle=None):
    doc = {
        "tool": "menkf",
        "version": __version__,
        "backend": BACKEND,
        "command": command,
        "config": {k: getattr(cfg, k) for k in _EXP_KEYS},
        "run": run_keys,
        "outputs": [os.path.basename(p) for p in outputs],
        "walltime": walltime,
        "diverged": bool(diverged),
        "diverged_cycle": diverged_cycle,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_manifest(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    values = dict(doc.get("config", {}))
    values.update(doc.get("run", {}))
    values = {k: v for k, v in values.items() if k in _ALL_KEYS}
    return doc, values


# ---------------------------------------------------------------------------
# argument parsing

def _build_parser():
    ap = argparse.ArgumentParser(
        prog="menkf",
        description="Mollified ensemble Kalman filtering on the slow-fast "
                    "Lorenz-96 model: twin experiments, sweeps, balance studies.",
    )
    ap.add_argument("--version", action="version", version=f"menkf {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(sp, with_run_keys=True):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--from-manifest", dest="from_manifest",
                        help="re-run the configuration recorded in a manifest")
        sp.add_argument("--out-dir", default=".", help="artifact directory")
        for key in _EXP_KEYS:
            flag = "--" + key.replace("_", "-")
            sp.add_argument(flag, dest=key, default=None)
        if with_run_keys:
            sp.add_argument("--scheme", dest="scheme", default=None,
                            choices=["enkf_standard", "menkf", "iau_enkf"])
            sp.add_argument("--r0", dest="r0", default=None)
            sp.add_argument("--lambda", dest="lambda_", default=None)

    sp = sub.add_parser("truth", help="emit the truth trajectory and observations")
    add_common(sp, with_run_keys=False)

    sp = sub.add_parser("run", help="run one assimilation scheme")
    add_common(sp)

    sp = sub.add_parser("sweep", help="best-RMSE table over (scheme, r0, lambda)")
    add_common(sp, with_run_keys=False)
    sp.add_argument("--schemes", default="enkf_standard,menkf,iau_enkf",
                    help="comma-separated scheme list")

    sp = sub.add_parser("balance-study",
                        help="max imbalance of the free model vs eps")
    add_common(sp, with_run_keys=False)
    sp.add_argument("--eps-list", default="0.01,0.005,0.0025")
    sp.add_argument("--horizon", type=float, default=4.0,
                    help="measurement window length T")
    sp.add_argument("--study-u0", default="zero", choices=["zero", "derivative"])

    sp = sub.add_parser("check", help="run the built-in oracle identities")
    return ap


def _gather_values(args):
    values = {}
    if getattr(args, "from_manifest", None):
        _, values = _load_manifest(args.from_manifest)
    elif getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            values = _parse_config_text(fh.read(), origin=args.config)
    for key in _EXP_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if getattr(args, "scheme", None) is not None:
        values["scheme"] = args.scheme
    if getattr(args, "r0", None) is not None:
        values["r0"] = args.r0
    if getattr(args, "lambda_", None) is not None:
        values["lambda"] = args.lambda_
    return values


# ---------------------------------------------------------------------------
# subcommands

def _cmd_truth(args):
    cfg, _, _, _ = resolve_config(_gather_values(args))
    os.makedirs(args.out_dir, exist_ok=True)
    traj = make_truth(cfg)
    hop = make_observation_operator(cfg.obs_kind, cfg.n_grid)
    R = cfg.obs_r * np.eye(hop.p)
    stream = generate_observations(traj.states, hop, R, cfg.dt_obs, cfg.seed_obs)

    n = cfg.n_grid
    cols = (["cycle", "t"] + [f"x{l}" for l in range(n)]
            + [f"h{l}" for l in range(n)] + [f"u{l}" for l in range(n)])
    truth_path = os.path.join(args.out_dir, "truth.csv")
    _emit_state_csv(cols, traj.times, traj.states, truth_path)
    obs_cols = ["cycle", "t"] + [f"y{i}" for i in range(hop.p)]
    obs_path = os.path.join(args.out_dir, "observations.csv")
    _emit_state_csv(obs_cols, stream.times, stream.values, obs_path)
    write_manifest(os.path.join(args.out_dir, "manifest.json"), "truth", cfg,
                   {}, [truth_path, obs_path], walltime=0.0)
    print(f"wrote {truth_path} and {obs_path} ({cfg.cycles} cycles)")
    return 0


def _cmd_run(args):
    cfg, scheme, r0, lam = resolve_config(_gather_values(args))
    cfg.filter_config(scheme, lam, r0)  # validate before the long run
    os.makedirs(args.out_dir, exist_ok=True)
    res = run_twin(cfg, scheme, r0, lam)
    series_path = os.path.join(args.out_dir, "series.csv")
    emit_series_csv(res, series_path)
    write_manifest(os.path.join(args.out_dir, "manifest.json"), "run", cfg,
                   {"scheme": scheme, "r0": r0, "lambda": lam},
                   [series_path], res.walltime, res.diverged, res.diverged_cycle)
    if res.diverged:
        print(f"{scheme}: DIVERGED at cycle {res.diverged_cycle} "
              f"(series truncated, see {series_path})")
        return 1
    print(f"{scheme}: rmse_x={res.summary_rmse_x:.4f} "
          f"rmse_h={res.summary_rmse_h:.4f} over {res.n_cycles} cycles "
          f"({res.walltime:.1f}s, backend={BACKEND})")
    return 0


def _cmd_sweep(args):
    cfg, _, _, _ = resolve_config(_gather_values(args))
    schemes = [s.strip() for s in args.schemes.split(",") if s.strip()]
    for s in schemes:
        if s not in ("enkf_standard", "menkf", "iau_enkf"):
            raise ConfigError(f"unknown scheme {s!r}")
    os.makedirs(args.out_dir, exist_ok=True)
    import time as _t
    t0 = _t.perf_counter()
    rows = sweep(cfg, schemes)
    walltime = _t.perf_counter() - t0
    path = os.path.join(args.out_dir, "sweep.csv")
    emit_sweep_csv(rows, path)
    write_manifest(os.path.join(args.out_dir, "manifest.json"), "sweep", cfg,
                   {"schemes": ",".join(schemes)}, [path], walltime,
                   diverged=any(r.diverged for r in rows))
    for r in rows:
        tag = "DIVERGED" if r.diverged else (
            f"best_x(lam={r.best_lambda_x:g})={r.best_rmse_x:.4f} "
            f"best_h(lam={r.best_lambda_h:g})={r.best_rmse_h:.4f}")
        print(f"{r.scheme:14s} r0={r.r0:g}: {tag}")
    return 1 if any(r.diverged for r in rows) else 0


def _cmd_balance_study(args):
    cfg, _, _, _ = resolve_config(_gather_values(args))
    eps_list = tuple(float(v) for v in args.eps_list.split(",") if v.strip())
    os.makedirs(args.out_dir, exist_ok=True)
    rows = balance_scaling_study(cfg, eps_list=eps_list, T=args.horizon,
                                 u0_mode=args.study_u0)
    path = os.path.join(args.out_dir, "balance.csv")
    lines = ["eps,max_imbalance"]
    for eps, worst in rows:
        lines.append(f"{_g17(eps)},{_g17(worst)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    write_manifest(os.path.join(args.out_dir, "manifest.json"), "balance-study",
                   cfg, {"eps_list": args.eps_list, "horizon": args.horizon,
                         "u0_mode": args.study_u0}, [path], walltime=0.0)
    for eps, worst in rows:
        print(f"eps={eps:g}: max imbalance {worst:.6e}")
    return 0


def _cmd_check(args):
    from .selfcheck import run_selfcheck

    failures = run_selfcheck(print)
    if failures:
        print(f"{failures} identity check(s) FAILED")
        return 1
    print("all identity checks passed")
    return 0


def main(argv=None) -> int:
    ap = _build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, 0 on --help/--version
        return int(exc.code or 0)
    handlers = {
        "truth": _cmd_truth,
        "run": _cmd_run,
        "sweep": _cmd_sweep,
        "balance-study": _cmd_balance_study,
        "check": _cmd_check,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
