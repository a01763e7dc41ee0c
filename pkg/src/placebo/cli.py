"""Command-line entry point: ``placebo {estimate,sensitivity,simulate}``.

Settings resolve in the order built-in default < environment (``PLACEBO_SEED``,
``PLACEBO_THREADS``) < ``--config`` file < explicit flags. The effective
settings, except the thread count, are echoed into every output so a run can be
repeated from its own output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from placebo.data import DataError, load_csv
from placebo.design import DesignError, DesignSpec
from placebo.estimators import KINDS, NAIVE, REQUIRES, DegenerateWeightError, Recipe
from placebo.inference import METHODS, InferenceError, estimate
from placebo.nuisance import FitError
from placebo.sensitivity import (
    GRID_COLUMNS,
    LinearBox,
    MarginalParams,
    SensitivityError,
    grid_rows,
    linear_ci,
    marginal_ci,
    marginal_grid,
)
from placebo.sim import SCENARIOS, run_study

EXIT_DATA = 2
EXIT_FIT = 3
EXIT_INFERENCE = 4
EXIT_SKIPS = 5
MAX_SKIP_RATE = 0.05

# keys never echoed: they cannot change results
_UNECHOED = {"threads", "config", "command", "output", "table", "raw"}


class ConfigError(ValueError):
    pass


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"environment variable {name} must be an integer, got {raw!r}") from None


def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file; explicit flags take precedence")
    p.add_argument("--seed", type=int, help="master seed (default $PLACEBO_SEED or 0)")
    p.add_argument("--threads", type=int, help="worker count (default $PLACEBO_THREADS or 1); never changes results")
    p.add_argument("--alpha", type=float, default=0.05, help="1 - confidence level (default 0.05)")
    p.add_argument("--boot-reps", type=int, default=200, help="bootstrap resamples B (default 200)")
    p.add_argument("--output", help="also write the result to this path")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="input CSV with a header row")
    p.add_argument("--outcome", default="Y", help="outcome column (default Y)")
    p.add_argument("--treatment", default="A", help="treatment column (default A)")
    p.add_argument("--sample", default="S", help="sample indicator column, 1 = primary (default S)")
    p.add_argument("--covariates", help="comma-separated covariate columns (default: all other columns)")
    p.add_argument("--weights", help="frequency-weight column (default: none)")
    p.add_argument("--estimator", default="dr", choices=KINDS, help="estimator (default dr)")
    p.add_argument("--mu", help='outcome design, e.g. "1 + X1 + S + A + S:A" (default: see README)')
    p.add_argument("--pi-s", help="P(S=1|X) design (logit link)")
    p.add_argument("--pi-a", help="P(A=1|X,S) design (logit link)")
    p.add_argument("--normalized-dr", action="store_true", default=False,
                   help="normalize each dr augmentation block by its own weight total")
    p.add_argument("--stratified-bootstrap", action="store_true", default=False,
                   help="resample within each (S, A) cell")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="placebo", description="Placebo-sample estimation of treated-group effects.")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="point estimate with a standard error and CI")
    _add_data(est)
    est.add_argument("--se", default="plugin", choices=METHODS, help="inference method (default plugin)")
    _add_common(est)

    sens = sub.add_parser("sensitivity", help="bounds and CIs under a sensitivity model")
    _add_data(sens)
    sens.add_argument("--model", default="marginal", choices=("linear", "marginal"), help="sensitivity model")
    sens.add_argument("--gamma-l", type=float, default=0.0, help="linear model: lower bound for every delta")
    sens.add_argument("--gamma-u", type=float, default=0.0, help="linear model: upper bound for every delta")
    sens.add_argument("--lambda-l", type=float, default=0.0, help="linear model: lower bound for every lambda")
    sens.add_argument("--lambda-u", type=float, default=0.0, help="linear model: upper bound for every lambda")
    sens.add_argument("--override", action="append", default=None, metavar="NAME=LO,HI",
                      help="linear model: range for one coordinate (delta0, lambda0, delta:X1, lambda:X1)")
    sens.add_argument("--gamma", type=float, default=1.0, help="marginal model: odds-ratio bound (>= 1)")
    sens.add_argument("--lambda", dest="lambda_", type=float, default=0.0,
                      help="marginal model: placebo-effect bound (>= 0)")
    sens.add_argument("--gamma-grid", help="marginal model: comma-separated Gamma values (CSV sweep)")
    sens.add_argument("--lambda-grid", help="marginal model: comma-separated Lambda values (CSV sweep)")
    sens.add_argument("--shift-outcome", type=float, default=None,
                      help="add this constant to every outcome before the marginal model (changes bound widths)")
    _add_common(sens)

    sim = sub.add_parser("simulate", help="Monte-Carlo study over the eight scenarios")
    sim.add_argument("--scenario", default="I", help="I..VIII, a comma-separated list, or 'all'")
    sim.add_argument("--reps", type=int, default=500, help="replicates per scenario (default 500)")
    sim.add_argument("--n", type=int, default=1000, help="sample size per replicate (default 1000)")
    sim.add_argument("--trim", type=float, default=0.01, help="fraction trimmed for the bias, split over both tails")
    sim.add_argument("--table", help="write the aligned text table here")
    sim.add_argument("--raw", help="write per-replicate estimates here (CSV)")
    _add_common(sim)
    return parser


def _read_config(path: str, sub: argparse.ArgumentParser) -> dict:
    dests = {a.dest: a for a in sub._actions}
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.lstrip("-").replace("-", "_")
        if dest == "lambda":
            dest = "lambda_"
        action = dests.get(dest)
        if action is None or dest in ("help", "config"):
            raise ConfigError(f"{path}:{number}: unknown setting {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            out[dest] = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            out.setdefault(dest, []).append(value)
        else:
            try:
                out[dest] = action.type(value) if action.type else value
            except ValueError:
                raise ConfigError(f"{path}:{number}: bad value for {key!r}: {value!r}") from None
            if action.choices and out[dest] not in action.choices:
                raise ConfigError(f"{path}:{number}: {key} must be one of {list(action.choices)}")
    return out


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**_read_config(args.config, sub))
        args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = _env_int("PLACEBO_SEED", 0)
    if args.threads is None:
        args.threads = _env_int("PLACEBO_THREADS", 1)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return args


def effective_config(args: argparse.Namespace) -> dict:
    out = {"command": args.command}
    for key, value in sorted(vars(args).items()):
        if key in _UNECHOED:
            continue
        out[key.rstrip("_")] = value
    return out


# --------------------------------------------------------------------------- designs


def default_designs(estimator: str, covariates) -> dict:
    """Main-effect designs: outcome with S, A, S:A and S-by-covariate terms; logistic propensities."""
    covs = " + ".join(covariates)
    lead = f"1 + {covs}" if covs else "1"
    if estimator in NAIVE:
        return {"mu": f"{lead} + A", "pi_s": None, "pi_a": lead}
    s_terms = "".join(f" + S:{c}" for c in covariates)
    return {"mu": f"{lead} + S + A + S:A{s_terms}", "pi_s": lead, "pi_a": f"{lead} + S"}


def build_recipe(args, covariates) -> Recipe:
    defaults = default_designs(args.estimator, covariates)
    texts = {"mu": args.mu or defaults["mu"], "pi_s": args.pi_s or defaults["pi_s"],
             "pi_a": args.pi_a or defaults["pi_a"]}
    links = {"mu": "identity", "pi_s": "logit", "pi_a": "logit"}
    specs = {role: DesignSpec.parse(text, links[role]) if text else None for role, text in texts.items()}
    for role in texts:
        if role not in REQUIRES[args.estimator]:
            specs[role] = None
    for spec in specs.values():
        if spec is None:
            continue
        for term in spec.terms:
            for name in term.covariates:
                if name not in covariates:
                    raise DataError("missing_column", f"design term {term} names unknown column {name!r}",
                                    column=name)
    try:
        return Recipe(args.estimator, normalized=args.normalized_dr, **specs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load(args):
    if not args.data:
        raise ConfigError("--data is required")
    covs = [c.strip() for c in args.covariates.split(",") if c.strip()] if args.covariates else None
    d = load_csv(args.data, args.outcome, args.treatment, args.sample, covs, args.weights)
    recipe = build_recipe(args, d.covariate_names)
    # echo the designs actually used, defaults included
    for role in ("mu", "pi_s", "pi_a"):
        spec = getattr(recipe, role)
        setattr(args, role, str(spec) if spec is not None else None)
    return d, recipe


# --------------------------------------------------------------------------- commands


def _emit(text: str, path: str | None) -> None:
    sys.stdout.write(text)
    if path:
        Path(path).write_text(text, encoding="utf-8")


def _json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n"


def cmd_estimate(args) -> int:
    d, recipe = _load(args)
    res = estimate(d, recipe, args.se, args.alpha, args.boot_reps, args.seed, args.stratified_bootstrap,
                   args.threads)
    _emit(_json({"config": effective_config(args), "result": res.to_json()}), args.output)
    return 0


def _overrides(items) -> dict:
    out = {}
    for item in items or []:
        try:
            name, rng = item.split("=", 1)
            lo, hi = _floats(rng)
        except ValueError:
            raise ConfigError(f"bad --override {item!r}; expected NAME=LO,HI") from None
        out[name.strip()] = (lo, hi)
    return out


def cmd_sensitivity(args) -> int:
    d, recipe = _load(args)
    common = dict(B=args.boot_reps, alpha=args.alpha, seed=args.seed, stratified=args.stratified_bootstrap,
                  threads=args.threads)
    if args.model == "linear":
        box = LinearBox(args.gamma_l, args.gamma_u, args.lambda_l, args.lambda_u, _overrides(args.override))
        res = linear_ci(d, recipe, box, **common)
        _emit(_json({"config": effective_config(args), "result": res.to_json()}), args.output)
        return 0
    if args.shift_outcome is not None:
        sys.stderr.write(f"warning: adding {args.shift_outcome!r} to every outcome; marginal-model bound "
                         "widths depend on this shift\n")
        d = d.with_outcome(d.y + args.shift_outcome)
    if args.gamma_grid or args.lambda_grid:
        gammas = _floats(args.gamma_grid) if args.gamma_grid else [args.gamma]
        lambdas = _floats(args.lambda_grid) if args.lambda_grid else [args.lambda_]
        for g in gammas:
            MarginalParams(g, 0.0)
        for lam in lambdas:
            MarginalParams(1.0, lam)
        results = marginal_grid(d, recipe, gammas, lambdas, **common)
        lines = [",".join(GRID_COLUMNS)]
        lines += [",".join(repr(float(v)) for v in row) for row in grid_rows(results)]
        _emit("\n".join(lines) + "\n", args.output)
        return 0
    res = marginal_ci(d, recipe, MarginalParams(args.gamma, args.lambda_), **common)
    _emit(_json({"config": effective_config(args), "result": res.to_json()}), args.output)
    return 0


def _scenarios(text: str) -> list[str]:
    if text.strip().lower() == "all":
        return list(SCENARIOS)
    names = [s.strip().upper() for s in text.split(",") if s.strip()]
    for name in names:
        if name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {name!r}; expected one of {list(SCENARIOS)} or 'all'")
    return names


def cmd_simulate(args) -> int:
    names = _scenarios(args.scenario)
    if args.reps < 1:
        raise ConfigError("--reps must be >= 1")
    report = run_study(names, args.reps, args.n, args.boot_reps, args.alpha, args.seed, args.threads, args.trim)
    csv_text = report.to_csv()
    if args.output:
        Path(args.output).write_text(csv_text, encoding="utf-8")
    if args.table:
        Path(args.table).write_text(report.table() + "\n", encoding="utf-8")
    if args.raw:
        Path(args.raw).write_text(report.raw_csv(), encoding="utf-8")
    sys.stdout.write(_json({"config": effective_config(args), "rows": report.rows}))
    rate = report.max_skip_rate()
    if rate > MAX_SKIP_RATE:
        sys.stderr.write(f"error [simulate]: replicate skip rate {rate:.1%} exceeds {MAX_SKIP_RATE:.0%}\n")
        return EXIT_SKIPS
    return 0


COMMANDS = {"estimate": cmd_estimate, "sensitivity": cmd_sensitivity, "simulate": cmd_simulate}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        sys.stderr.write(f"error [config]: {exc}\n")
        return EXIT_DATA
    try:
        return COMMANDS[args.command](args)
    except (DataError, DesignError, ConfigError) as exc:
        sys.stderr.write(f"error [data]: {exc}\n")
        return EXIT_DATA
    except SensitivityError as exc:
        sys.stderr.write(f"error [sensitivity]: {exc}\n")
        return EXIT_DATA
    except (FitError, DegenerateWeightError) as exc:
        sys.stderr.write(f"error [fit]: {exc}\n")
        return EXIT_FIT
    except (InferenceError, ValueError) as exc:
        sys.stderr.write(f"error [inference]: {exc}\n")
        return EXIT_INFERENCE


if __name__ == "__main__":
    sys.exit(main())
