"""Command-line entry point: ``simulate``, ``derivatives``, ``dictionary``, ``identify``, ``sweep``.

Settings come from an optional JSON file of flat dotted keys (for example
``{"generation.C": 5, "solver.k_max": 5}``); command-line flags override it.
Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from hetid.admm import AdmmOptions
from hetid.datamodel import read_dataset, validate_dataset, write_dataset
from hetid.derivatives import DifferenceSpec, derivative_csv, differentiate_experiment
from hetid.dictionary import DictionarySpec, build_dictionary, repressilator_spec
from hetid.evaluation import SweepConfig, run_sweep, state_problems
from hetid.simulator import GenerationConfig, IntegrationError, generate_dataset
from hetid.solver import SolverError, SolverOptions, group_lasso_baseline, identify

log = logging.getLogger("hetid")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# (flags, dotted key, type, help); every flag defaults to None so that only
# explicitly given flags override the config file
GENERATION = [
    (("--C",), "generation.C", int, "number of experiments"),
    (("--t-end",), "generation.t_end", float, "simulation horizon"),
    (("--sample-interval",), "generation.sample_interval", float, "resampling step"),
    (("--spread",), "generation.spread", float, "relative parameter perturbation"),
    (("--sigma",), "generation.sigma", float, "measurement noise standard deviation"),
    (("--seed",), "generation.seed", int, "random seed"),
    (("--rk-tol",), "generation.rk_tol", float, "integrator tolerance"),
]
DERIVATIVE = [(("--k",), "derivative.k", int, "difference half-window")]
DICTIONARY = [(("--spec",), "dictionary.spec", str, "dictionary spec JSON (default: repressilator)")]
SOLVER = [
    (("--algorithm",), "solver.algorithm", str, "full (reweighted) or group-lasso"),
    (("--lambda",), "solver.lam", float, "noise variance of the fixed-precision baseline"),
    (("--k-max",), "solver.k_max", int, "outer iterations"),
    (("--S-structure",), "solver.S_structure", str, "block, full or scaled_identity"),
    (("--theta-rule",), "solver.theta_rule", str, "sqrt or linear"),
    (("--jitter",), "solver.jitter", float, "relative diagonal load of the S-step"),
    (("--stop-tol",), "solver.stop_tol", float, "relative cost decrease stopping rule"),
    (("--rho",), "admm.rho", float, "ADMM penalty"),
    (("--eps-abs",), "admm.eps_abs", float, "ADMM absolute tolerance"),
    (("--eps-rel",), "admm.eps_rel", float, "ADMM relative tolerance"),
    (("--max-iters",), "admm.max_iters", int, "ADMM iteration cap"),
]
SWEEP = [
    (("--C-grid",), "sweep.C_grid", _int_list, "comma-separated experiment counts"),
    (("--M-grid",), "sweep.M_grid", _int_list, "comma-separated samples per experiment"),
    (("--repeats",), "sweep.repeats", int, "Monte Carlo repeats per cell"),
    (("--threads",), "sweep.threads", int, "worker processes"),
]


def _add(parser: argparse.ArgumentParser, table) -> None:
    for flags, key, typ, help_ in table:
        parser.add_argument(*flags, dest=key, type=typ, default=None, help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic repressilator dataset")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, default=Path("dataset"))
    _add(p, GENERATION)

    for name, help_ in (("derivatives", "write derivative estimates per experiment"),
                        ("dictionary", "write evaluated dictionaries per experiment")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("manifest", type=Path)
        p.add_argument("--config", type=Path)
        p.add_argument("--out", type=Path, default=Path(name))
        _add(p, DERIVATIVE)
        if name == "dictionary":
            _add(p, DICTIONARY)

    p = sub.add_parser("identify", help="identify the model of every state")
    p.add_argument("manifest", type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, default=Path("result.json"))
    p.add_argument("--states", type=_int_list, default=None, help="1-based states (default: all)")
    _add(p, DERIVATIVE + DICTIONARY + SOLVER)

    p = sub.add_parser("sweep", help="Monte Carlo RNMSE sweep over (C, M)")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, default=Path("sweep"))
    _add(p, SWEEP + [t for t in GENERATION if t[1] != "generation.C"] + DERIVATIVE + DICTIONARY + SOLVER)
    return parser


def _settings(args) -> dict:
    values = {}
    if getattr(args, "config", None) is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object of dotted keys")
        values.update(loaded)
    for key, val in vars(args).items():
        if "." in key and val is not None:
            values[key] = val
    return values


def _section(values: dict, prefix: str) -> dict:
    return {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(prefix + ".")}


def _build(cls, fields: dict, drop=()):
    fields = {k: v for k, v in fields.items() if k not in drop}
    try:
        return cls(**fields)
    except TypeError as exc:
        raise UsageError(f"bad {cls.__name__} setting: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def generation_config(values: dict) -> GenerationConfig:
    fields = _section(values, "generation")
    if "perturbed" in fields:
        fields["perturbed"] = tuple(fields["perturbed"])
    return _build(GenerationConfig, fields)


def derivative_spec(values: dict) -> DifferenceSpec:
    return _build(DifferenceSpec, _section(values, "derivative"))


def dictionary_spec(values: dict) -> DictionarySpec:
    path = _section(values, "dictionary").get("spec")
    if path is None:
        return repressilator_spec()
    try:
        return DictionarySpec.from_json(Path(path).read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load dictionary spec {path}: {exc}") from None


def solver_options(values: dict) -> tuple:
    """``(algorithm, lam, SolverOptions)``."""
    fields = _section(values, "solver")
    algorithm = str(fields.pop("algorithm", "full")).replace("_", "-")
    if algorithm not in ("full", "group-lasso"):
        raise UsageError(f"--algorithm must be 'full' or 'group-lasso', got {algorithm!r}")
    admm = _build(AdmmOptions, _section(values, "admm"))
    opts = _build(SolverOptions, {**fields, "admm": admm})
    return algorithm, opts.lam, opts


def load_dataset(manifest: Path):
    if not manifest.is_file():
        raise UsageError(f"manifest not found: {manifest}")
    try:
        ds = read_dataset(manifest)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read dataset {manifest}: {exc}") from None
    report = validate_dataset(ds)
    if not report.ok:
        raise UsageError(f"invalid dataset: {report}")
    return ds


def format_equation(state: int, w: np.ndarray, support, names, digits: int = 3) -> str:
    """``dx3 = 39.2·hill(x2,1,0,3) − 0.97·x3 + 0.51`` from the across-experiment mean weights.

    Terms are ordered by decreasing magnitude; the constant term prints bare.
    """
    coef = np.asarray(w, dtype=float).reshape(len(names), -1).mean(axis=1)
    terms = sorted(support, key=lambda i: (-abs(coef[i]), i))
    lhs = f"dx{state + 1} = "
    if not terms:
        return lhs + "0"
    parts = []
    for j, i in enumerate(terms):
        mag = f"{abs(coef[i]):.{digits}g}"
        body = mag if names[i] == "1" else f"{mag}·{names[i]}"
        sign = "−" if coef[i] < 0 else "+"
        if j == 0:
            parts.append(("−" if coef[i] < 0 else "") + body)
        else:
            parts.append(f" {sign} {body}")
    return lhs + "".join(parts)


# -- subcommands -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    config = generation_config(_settings(args))
    ds = generate_dataset(config)
    path = write_dataset(ds, args.out)
    for exp in ds.experiments:
        p = np.asarray(exp.meta["params"])
        print(f"experiment {exp.id}: production {p[:, 0].mean():.4g}, basal {p[:, 3].mean():.4g}, "
              f"degradation {p[:, 4].mean():.4g} (species means), {exp.n_samples} samples")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_derivatives(args) -> int:
    values = _settings(args)
    ds = load_dataset(args.manifest)
    spec = derivative_spec(values)
    args.out.mkdir(parents=True, exist_ok=True)
    for exp in ds.experiments:
        try:
            text = derivative_csv(exp, spec)
        except ValueError as exc:
            raise UsageError(f"experiment {exp.id}: {exc}") from None
        (args.out / f"derivatives_{exp.id:03d}.csv").write_text(text)
    print(f"wrote {ds.C} derivative files to {args.out}")
    return EXIT_OK


def cmd_dictionary(args) -> int:
    values = _settings(args)
    ds = load_dataset(args.manifest)
    diff, spec = derivative_spec(values), dictionary_spec(values)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "spec.json").write_text(spec.to_json())
    for exp in ds.experiments:
        try:
            _, idx = differentiate_experiment(exp, diff)
            dm = build_dictionary(exp, spec, idx)
        except ValueError as exc:
            raise UsageError(f"experiment {exp.id}: {exc}") from None
        (args.out / f"dictionary_{exp.id:03d}.csv").write_text(dm.to_csv())
    print(f"wrote {ds.C} dictionaries with {spec.N} columns to {args.out}")
    return EXIT_OK


def cmd_identify(args) -> int:
    values = _settings(args)
    ds = load_dataset(args.manifest)
    diff, spec = derivative_spec(values), dictionary_spec(values)
    algorithm, lam, opts = solver_options(values)
    states = [s - 1 for s in args.states] if args.states else list(range(ds.n_x))
    if any(not 0 <= s < ds.n_x for s in states):
        raise UsageError(f"--states must lie in 1..{ds.n_x}")
    try:
        spec.check(ds.n_x)
        problems = state_problems(ds, diff, spec, states)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    names = spec.names
    out = {"algorithm": algorithm, "C": ds.C, "M": problems[0].M, "k": diff.k, "states": []}
    for n, problem in zip(states, problems):
        if algorithm == "group-lasso":
            res = group_lasso_baseline(problem, lam, opts.admm, opts.support_tol)
        else:
            res = identify(problem, opts)
        eq = format_equation(n, res.w, res.support, names)
        print(eq)
        out["states"].append({"state": n + 1, "equation": eq, **res.to_json(names)})
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    values = _settings(args)
    sweep = _section(values, "sweep")
    algorithm, lam, opts = solver_options(values)
    if "solver.algorithm" in values:
        sweep["algorithms"] = ("group_lasso",) if algorithm == "group-lasso" else ("full",)
    gen_fields = {k: v for k, v in _section(values, "generation").items() if k != "C"}
    seed = gen_fields.pop("seed", sweep.pop("seed", 0))
    if "algorithms" in sweep:
        sweep["algorithms"] = tuple(sweep["algorithms"])
    for key in ("C_grid", "M_grid"):
        if key in sweep:
            sweep[key] = tuple(sweep[key])
    gen = generation_config({f"generation.{k}": v for k, v in gen_fields.items()})
    config = _build(SweepConfig, {**sweep, "generation": gen, "derivative": derivative_spec(values),
                                  "dictionary": dictionary_spec(values), "solver": opts,
                                  "lam": lam, "seed": seed})
    report = run_sweep(config)
    report.write(args.out)
    for alg in config.algorithms:
        try:
            best = report.best_cell(alg)
            print(f"{alg}: best mean RNMSE {best.mean:.4f} at C={best.C}, M={best.M}")
        except ValueError:
            print(f"{alg}: no valid cells")
    print(f"wrote {args.out} ({report.wall_time:.1f} s)")
    if report.invalid_cells:
        for c in report.invalid_cells:
            print(f"invalid cell {c.algorithm} C={c.C} M={c.M}: {c.n_failed} failed runs", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "derivatives": cmd_derivatives,
    "dictionary": cmd_dictionary,
    "identify": cmd_identify,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.exit(EXIT_USAGE, f"hetid {args.command}: error: {exc}\n")
    except (SolverError, IntegrationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"hetid {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
