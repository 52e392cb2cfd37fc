"""Command-line interface: ``miboost simulate | fit | impute``.

Precedence: built-in defaults < ``--config`` JSON file < command-line flags.
Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .simulation import METHODS, SimConfig, canonical_method

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    """Every option a config file may set. Unknown keys are rejected."""

    sim: SimConfig = field(default_factory=SimConfig)
    methods: list = field(default_factory=lambda: list(METHODS))
    threads: int = 0
    output_dir: str = "results"
    missing_token: str = "NA"

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        sim_keys = {f.name for f in fields(SimConfig)}
        own_keys = {"methods", "threads", "output_dir", "missing_token"}
        unknown = sorted(set(raw) - sim_keys - own_keys)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            sim = SimConfig(**{k: v for k, v in raw.items() if k in sim_keys})
            cfg = cls(sim=sim, **{k: v for k, v in raw.items() if k in own_keys})
            cfg.methods = [canonical_method(m) for m in cfg.methods]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        return cfg

    def to_dict(self) -> dict:
        out = self.sim.to_dict()
        out.update(methods=list(self.methods), threads=self.threads,
                   output_dir=self.output_dir, missing_token=self.missing_token)
        return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for name in ("n", "rounds", "M", "K", "t_stop_max", "nu", "seed", "cycles", "donor_count",
                 "threshold", "n_lambda", "n_alpha"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if overrides:
        try:
            cfg.sim = SimConfig(**{**cfg.sim.to_dict(), **overrides})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid option: {exc}") from None
    if getattr(args, "methods", None):
        try:
            cfg.methods = [canonical_method(m) for m in args.methods.split(",") if m.strip()]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "missing_token", None):
        cfg.missing_token = args.missing_token
    if cfg.threads <= 0:
        cfg.threads = os.cpu_count() or 1
    return cfg


def cmd_simulate(args) -> int:
    from .simulation import run_study

    cfg = _resolve(args)
    out = Path(cfg.output_dir)
    summary = run_study(cfg.sim, cfg.methods, threads=cfg.threads,
                        progress=(lambda r: print(f"round {r + 1}/{cfg.sim.rounds} done",
                                                  file=sys.stderr)) if args.verbose else None)
    summary.write(out, cfg.sim)
    # the thread count does not affect results; keep it out of the echo
    _write_json(out / "config.json", {k: v for k, v in cfg.to_dict().items() if k != "threads"})
    sys.stdout.write(summary.table(args.format))
    return EXIT_OK


def cmd_fit(args) -> int:
    from .crossval import write_cv_report
    from .data import DataError, load_csv

    cfg = _resolve(args)
    try:
        d = load_csv(args.data, args.response, cfg.missing_token)
    except FileNotFoundError:
        raise ConfigError(f"data file not found: {args.data}") from None
    except DataError as exc:
        raise ConfigError(str(exc)) from None
    from .crossval import miboost_cv

    ccfg = cfg.sim.cv_config(cfg.sim.seed)
    curve, fit = miboost_cv(d, ccfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    selected = [d.names[j] for j in fit.selected]
    model = fit.to_dict()
    model.update(response=d.response_name, covariates=list(d.names), t_star=curve.t_star,
                 selected=selected)
    _write_json(out / "model.json", model)
    write_cv_report(curve, ccfg, out)
    _write_json(out / "config.json", {k: v for k, v in cfg.to_dict().items() if k != "threads"})
    a, b = fit.linear_form()
    rows = [("(intercept)", a)] + [(d.names[j], b[j]) for j in range(d.p) if b[j] != 0]
    if args.format == "csv":
        sys.stdout.write(f"t_star,{curve.t_star}\nterm,coefficient\n")
        sys.stdout.writelines(f"{name},{v!r}\n" for name, v in rows)
    else:
        print(f"t_stop* = {curve.t_star}  (CV error {curve.errors[curve.t_star]:.6g})")
        print(f"selected ({len(selected)}): {', '.join(selected) if selected else '-'}")
        width = max(len(name) for name, _ in rows)
        for name, v in rows:
            print(f"  {name.ljust(width)}  {v: .6f}")
    return EXIT_OK


def cmd_impute(args) -> int:
    from .data import DataError, load_csv
    from .imputation import dump_imputation_set, mice_fit

    cfg = _resolve(args)
    response = args.response
    try:
        if response is None:
            with open(args.data, encoding="utf-8") as fh:
                response = fh.readline().strip().split(",")[0]
        d = load_csv(args.data, response, cfg.missing_token)
    except FileNotFoundError:
        raise ConfigError(f"data file not found: {args.data}") from None
    except DataError as exc:
        raise ConfigError(str(exc)) from None
    imp = mice_fit(d, M=args.M if args.M is not None else cfg.sim.M, cycles=cfg.sim.cycles,
                   donor_count=cfg.sim.donor_count, threshold=cfg.sim.threshold, seed=cfg.sim.seed)
    paths = dump_imputation_set(imp, cfg.output_dir)
    _write_json(Path(cfg.output_dir) / "config.json",
                {k: v for k, v in cfg.to_dict().items() if k != "threads"})
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="miboost", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, methods=False):
        p.add_argument("--config", help="JSON config file (flags override its values)")
        p.add_argument("--seed", type=int, help="base random seed")
        p.add_argument("--threads", type=int, help="worker processes (default: all cores)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--format", choices=("text", "csv"), default="text",
                       help="stdout table format")
        p.add_argument("--M", type=int, help="number of imputations")
        p.add_argument("--cycles", type=int, help="chained-equation cycles")
        p.add_argument("--donor-count", dest="donor_count", type=int, help="PMM donors")
        p.add_argument("--threshold", type=float, help="|Spearman| screening threshold")
        p.add_argument("-v", "--verbose", action="store_true")
        if methods:
            p.add_argument("--methods", help=f"comma list from {', '.join(METHODS)}")

    p = sub.add_parser("simulate", help="run the simulation study")
    common(p, methods=True)
    p.add_argument("--rounds", type=int, help="simulation rounds")
    p.add_argument("--n", type=int, help="observations per round")
    p.add_argument("--K", type=int, help="CV folds")
    p.add_argument("--t-stop-max", dest="t_stop_max", type=int, help="max boosting iterations")
    p.add_argument("--nu", type=float, help="step length")
    p.add_argument("--n-lambda", dest="n_lambda", type=int, help="lambda grid length")
    p.add_argument("--n-alpha", dest="n_alpha", type=int, help="alpha grid length")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="cross-validated MIBoost on a CSV file")
    p.add_argument("data", help="CSV file with header row")
    p.add_argument("--response", required=True, help="response column label")
    p.add_argument("--missing-token", dest="missing_token", help="missing-value marker (default NA)")
    common(p)
    p.add_argument("--K", type=int, help="CV folds")
    p.add_argument("--t-stop-max", dest="t_stop_max", type=int, help="max boosting iterations")
    p.add_argument("--nu", type=float, help="step length")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("impute", help="multiply impute a CSV file")
    p.add_argument("data", help="CSV file with header row")
    p.add_argument("--response", help="response column label (default: first column)")
    p.add_argument("--missing-token", dest="missing_token", help="missing-value marker (default NA)")
    common(p)
    p.set_defaults(func=cmd_impute)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"miboost {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        print(f"miboost {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
