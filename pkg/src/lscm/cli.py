"""Command line interface.

Subcommands: ``simulate``, ``estimate``, ``test``, ``level-study``,
``consistency-study`` and ``intervention-check``.  Options may come from a
JSON config file (``--config``); command line flags override config values,
which override built-in defaults.  Every stochastic run prints its seed on
stderr so it can be replayed bit-exactly, writes machine-readable output
(result documents or delimited tables) and prints a one-line summary on
stdout.  Exit codes: 0 success, 1 data or configuration error, 2 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass

from . import __version__
from .datacube import (CubeSchema, config_digest, read_cube, transpose_axes,
                       write_cube, write_results)
from .errors import ConfigError, NumericalError, ToolkitError
from .estimators import (BasisSpec, estimate_ace, estimate_ace_binary,
                         estimate_ace_observed_confounder, estimate_model1,
                         estimate_model2)
from .experiments import (ConsistencyStudySpec, run_consistency_study,
                          run_intervention_check, run_level_study, write_table)
from .resampling import (PermutationScheme, effect_statistic, enumerate_exact,
                         run_test)
from .simulate import FORMS, GridSampling, LscmSpec, simulate_lscm

ESTIMATORS = ("lscm-basis", "lscm-binary", "model1", "model2", "observed-confounder")

DEFAULTS = {
    "simulate": {"form": "confounded_linear", "nx": 25, "ny": 25, "m": 100,
                 "spacing": 1.0, "seed": None, "output": "cube.csv",
                 "latent_output": None},
    "estimate": {"input": None, "output": "estimate.json", "estimator": "lscm-basis",
                 "degree": 1, "lag": 0, "bins": 100, "w_column": None,
                 "transpose": False, "delimiter": ","},
    "test": {"input": None, "output": "test.json", "estimator": "lscm-binary",
             "scheme": "time_full", "B": 999, "seed": None, "threads": 1,
             "degree": 1, "lag": 0, "bins": 100, "w_column": None,
             "transpose": False, "delimiter": ",", "exact": False, "cap": 5040},
    "level-study": {"form": "confounded_null_binary", "nx": 10, "ny": 10, "m": 20,
                    "alpha": 0.05, "B": 199, "R": 500, "scheme": "time_full",
                    "seed": None, "threads": 1, "output": "level_study.csv"},
    "consistency-study": {"n_values": "25,100,225,400,625",
                          "m_values": "25,50,100,200,500", "R": 100, "delta": 0.2,
                          "seed": None, "output": "consistency_study.csv"},
    "intervention-check": {"form": "confounded_linear", "x_values": "-2,0,1,2",
                           "draws": 100000, "seed": None,
                           "output": "intervention_check.csv"},
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the documented contract is 1.
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="lscm", description=__doc__)
    parser.add_argument("--version", action="version", version=f"lscm {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--output", "-o", help="output path")
        return p

    p = add("simulate", "simulate a synthetic dataset and write it as CSV")
    p.add_argument("--form", choices=FORMS)
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--spacing", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--latent-output", help="optional CSV of the hidden latent fields")

    p = add("estimate", "estimate the average causal effect from a cube CSV")
    p.add_argument("--input", help="cube CSV path")
    p.add_argument("--estimator", choices=ESTIMATORS)
    p.add_argument("--degree", type=int, help="polynomial basis degree")
    p.add_argument("--lag", type=int, help="treatment lag (lscm-binary only)")
    p.add_argument("--bins", type=int, help="quantile bins (model2)")
    p.add_argument("--w-column", help="confounder column, by name or index")
    p.add_argument("--transpose", action="store_const", const=True,
                   help="exchange the time axis with the first spatial axis")
    p.add_argument("--delimiter")

    p = add("test", "permutation test of no treatment effect")
    p.add_argument("--input", help="cube CSV path")
    p.add_argument("--estimator", choices=ESTIMATORS)
    p.add_argument("--scheme", help="time_full | time_block[:L] | spatial_block:K | "
                                    "stratified_by_quantile[:BINS] | fully_random")
    p.add_argument("--B", type=int, help="number of resampled datasets")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--degree", type=int)
    p.add_argument("--lag", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--w-column")
    p.add_argument("--transpose", action="store_const", const=True)
    p.add_argument("--delimiter")
    p.add_argument("--exact", action="store_const", const=True,
                   help="enumerate all m! time permutations instead of sampling")
    p.add_argument("--cap", type=int, help="largest m! allowed with --exact")

    p = add("level-study", "empirical test level on simulated null data")
    p.add_argument("--form", choices=[f for f in FORMS if "null" in f])
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--B", type=int)
    p.add_argument("--R", type=int, help="number of simulated datasets")
    p.add_argument("--scheme")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)

    p = add("consistency-study", "estimator error probability over growing panels")
    p.add_argument("--n-values", help="comma-separated grid sizes (perfect squares)")
    p.add_argument("--m-values", help="comma-separated time lengths")
    p.add_argument("--R", type=int, help="replicates per cell")
    p.add_argument("--delta", type=float, help="error radius (inf disables)")
    p.add_argument("--seed", type=int)

    p = add("intervention-check", "Monte Carlo check of the interventional means")
    p.add_argument("--form", choices=FORMS)
    p.add_argument("--x-values", help="comma-separated treatment values")
    p.add_argument("--draws", type=int)
    p.add_argument("--seed", type=int)
    return parser


def _merge_options(command: str, args: argparse.Namespace) -> dict:
    options = dict(DEFAULTS[command])
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                config = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        for key, value in config.items():
            key = key.replace("-", "_")
            if key not in options:
                raise ConfigError(f"unknown config key {key!r} for command {command!r}")
            options[key] = value
    for key in options:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            options[key] = flag_value
    return options


def _require(options: dict, key: str) -> str:
    if not options.get(key):
        raise ConfigError(f"missing required option --{key.replace('_', '-')}")
    return options[key]


def _resolve_seed(options: dict) -> int:
    seed = options.get("seed")
    if seed is None:
        seed = int.from_bytes(os.urandom(8), "little") >> 1
        note = " (auto-generated)"
    else:
        seed = int(seed)
        note = ""
    print(f"seed: {seed}{note}", file=sys.stderr)
    return seed


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _float_list(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _load_cube(options: dict):
    path = _require(options, "input")
    schema = CubeSchema(delimiter=options.get("delimiter") or ",")
    cube = read_cube(path, schema)
    if options.get("transpose"):
        cube = transpose_axes(cube)
    return cube, path


def _w_column_index(cube, value) -> int:
    if value is None:
        return 0
    text = str(value)
    if text.lstrip("-").isdigit():
        index = int(text)
    elif text in cube.covariate_names:
        index = cube.covariate_names.index(text)
    else:
        raise ConfigError(f"unknown covariate column {text!r}; "
                          f"cube has {list(cube.covariate_names)}")
    if not 0 <= index < cube.n_covariates:
        raise ConfigError(f"covariate index {index} out of range")
    return index


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _validate_compatibility(options: dict, cube) -> None:
    estimator = options["estimator"]
    if int(options.get("lag") or 0) and estimator != "lscm-binary":
        raise ConfigError("--lag is only supported by the lscm-binary estimator")
    if estimator in ("model2", "observed-confounder") and cube.n_covariates == 0:
        raise ConfigError(f"{estimator} requires covariate columns in the input")


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_simulate(options: dict) -> None:
    seed = _resolve_seed(options)
    spec = LscmSpec(grid=GridSampling(int(options["nx"]), int(options["ny"]),
                                      float(options["spacing"])),
                    m=int(options["m"]), form=options["form"], seed=seed)
    cube, latent = simulate_lscm(spec)
    write_cube(cube, options["output"])
    if options.get("latent_output"):
        with open(options["latent_output"], "w", encoding="utf-8") as fh:
            fh.write("loc_id,s1,s2,latent_first,latent_second\n")
            for i, loc in enumerate(cube.locations):
                fh.write(f"{loc.id},{loc.s1!r},{loc.s2!r},"
                         f"{float(latent.first[i])!r},{float(latent.second[i])!r}\n")
    print(f"simulate[{spec.form}]: n={cube.n} m={cube.m} -> {options['output']}")


def _estimate_for(options: dict, cube):
    estimator = options["estimator"]
    if estimator == "lscm-basis":
        return estimate_ace(cube, BasisSpec.polynomial(int(options["degree"])))
    if estimator == "lscm-binary":
        return estimate_ace_binary(cube, lag=int(options["lag"]))
    if estimator == "model1":
        return estimate_model1(cube)
    if estimator == "model2":
        return estimate_model2(cube, n_bins=int(options["bins"]),
                               w_column=_w_column_index(cube, options.get("w_column")))
    basis = BasisSpec.polynomial_with_covariates(int(options["degree"]), cube.n_covariates)
    return estimate_ace_observed_confounder(cube, basis)


def _cmd_estimate(options: dict) -> None:
    cube, input_path = _load_cube(options)
    _validate_compatibility(options, cube)
    estimate = _estimate_for(options, cube)
    semantic = {k: options[k] for k in ("estimator", "degree", "lag", "bins", "w_column",
                                        "transpose")}
    semantic["input_sha256"] = _file_digest(input_path)
    write_results(estimate, options["output"],
                  provenance={"command": "estimate", "config_hash": config_digest(semantic)})
    if estimate.kind == "binary":
        f0, f1 = (v for _, v in estimate.value_table)
        summary = f"f(0)={f0:.6g} f(1)={f1:.6g} difference={f1 - f0:.6g}"
    else:
        summary = "coefficients=(" + ", ".join(f"{c:.6g}" for c in estimate.coefficients) + ")"
    print(f"estimate[{estimate.method}]: {summary} "
          f"n_used={estimate.n_used}/{estimate.n_total} -> {options['output']}")


@dataclass(frozen=True)
class _ExactRow:
    statistic_name: str
    statistic_observed: float
    n_permutations: int
    count_ge: int
    p_one_sided: float
    p_two_sided: float


def _cmd_test(options: dict) -> None:
    cube, input_path = _load_cube(options)
    _validate_compatibility(options, cube)
    statistic = effect_statistic(
        options["estimator"], degree=int(options["degree"]), lag=int(options["lag"]),
        n_bins=int(options["bins"]),
        w_column=_w_column_index(cube, options.get("w_column")) if cube.n_covariates else 0)
    if options.get("exact"):
        result = enumerate_exact(cube, statistic, cap=int(options["cap"]))
        row = _ExactRow(result.statistic_name, result.statistic_observed,
                        result.n_permutations, result.count_ge,
                        result.p_one_sided, result.p_two_sided)
        write_table([row], options["output"])
        print(f"test[{result.statistic_name}]: statistic={result.statistic_observed:.6g} "
              f"p_one_sided={result.count_ge}/{result.n_permutations} (exact) "
              f"-> {options['output']}")
        return
    scheme = PermutationScheme.parse(options["scheme"])
    if scheme.kind == "stratified_by_quantile":
        scheme = PermutationScheme.stratified_by_quantile(
            scheme.n_bins, _w_column_index(cube, options.get("w_column")))
    scheme.validate_for(cube)
    seed = _resolve_seed(options)
    result = run_test(cube, statistic, scheme, b_resamples=int(options["B"]),
                      seed=seed, threads=int(options["threads"]))
    semantic = {k: options[k] for k in ("estimator", "scheme", "B", "degree", "lag",
                                        "bins", "w_column", "transpose")}
    semantic.update(seed=seed, input_sha256=_file_digest(input_path))
    write_results(result, options["output"],
                  provenance={"command": "test", "seed": seed,
                              "scheme": scheme.describe(),
                              "config_hash": config_digest(semantic)})
    num, den = result.p_one_sided_fraction
    print(f"test[{result.statistic_name}]: statistic={result.statistic_observed:.6g} "
          f"p_one_sided={num}/{den} p_two_sided={result.p_two_sided:.6g} "
          f"-> {options['output']}")


def _cmd_level_study(options: dict) -> None:
    seed = _resolve_seed(options)
    spec = LscmSpec(grid=GridSampling(int(options["nx"]), int(options["ny"])),
                    m=int(options["m"]), form=options["form"], seed=0)
    result = run_level_study(
        spec, alpha=float(options["alpha"]), b_resamples=int(options["B"]),
        replicates=int(options["R"]), scheme=PermutationScheme.parse(options["scheme"]),
        seed=seed, threads=int(options["threads"]))
    write_table([result], options["output"])
    print(f"level-study[{result.statistic}]: rejection_rate="
          f"{result.rejections}/{result.replicates}={result.rejection_rate:.4g} "
          f"ci95=[{result.ci_low:.4g}, {result.ci_high:.4g}] -> {options['output']}")


def _cmd_consistency_study(options: dict) -> None:
    seed = _resolve_seed(options)
    spec = ConsistencyStudySpec(
        n_values=_int_list(options["n_values"]), m_values=_int_list(options["m_values"]),
        replicates=int(options["R"]), delta=float(options["delta"]), seed=seed)
    cells = run_consistency_study(spec)
    write_table(cells, options["output"])
    print(f"consistency-study: {len(cells)} cells x {spec.replicates} replicates "
          f"-> {options['output']}")


def _cmd_intervention_check(options: dict) -> None:
    seed = _resolve_seed(options)
    spec = LscmSpec(grid=GridSampling(1, 1), m=1, form=options["form"], seed=0)
    rows = run_intervention_check(spec, x_values=_float_list(options["x_values"]),
                                  draws=int(options["draws"]), seed=seed)
    write_table(rows, options["output"])
    flagged = sum(r.flagged for r in rows)
    print(f"intervention-check[{spec.form}]: flagged={flagged}/{len(rows)} "
          f"-> {options['output']}")


_COMMANDS = {
    "simulate": _cmd_simulate,
    "estimate": _cmd_estimate,
    "test": _cmd_test,
    "level-study": _cmd_level_study,
    "consistency-study": _cmd_consistency_study,
    "intervention-check": _cmd_intervention_check,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("lscm: error: a subcommand is required", file=sys.stderr)
            return 1
        options = _merge_options(args.command, args)
        _COMMANDS[args.command](options)
        return 0
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"lscm: numerical failure: {exc}", file=sys.stderr)
        return 2
    except ToolkitError as exc:
        print(f"lscm: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"lscm: i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
