"""Command-line front end for fitting and checking linear mixed models.

Three subcommands:

``fit``       fit an LMM to long-format CSV data and write a JSON
              summary (coefficients, variance components, BLUPs)
``gof``       fit, then run cusum goodness-of-fit tests; writes a JSON
              report, a trace CSV holding the observed and null
              processes, and one PNG figure per requested process
``simulate``  run a Monte-Carlo size/power study from a scenario JSON;
              writes the rejection-table CSV, a metadata JSON, and a
              rates figure

Exit codes: 0 on success, 2 for invalid input (missing files, bad
configs, degenerate designs), 3 when fitting or the null ensemble
fails to converge.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .cusum import export_trace
from .data import DataError, ModelConfig, load_dataset
from .estimation import NoConvergence, fit_lmm
from .figures import save_gof_figure, save_rejection_figure
from .harness import SimulationScenario, run_study
from .nulls import (
    SCHEME_KINDS,
    WEIGHT_LAWS,
    NullRefitFailure,
    NullScheme,
    run_gof_many,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3

# below this, neighbouring p-values differ by more than 0.01 and the
# test is too coarse to be worth running
MIN_REPLICATES = 19
RECOMMENDED_REPLICATES = 99


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmmgof",
        description="Cusum goodness-of-fit tests for linear mixed models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_flags(p):
        p.add_argument("--data", required=True, help="long-format CSV file")
        p.add_argument("--model", required=True, help="model config JSON")
        p.add_argument("--method", choices=("REML", "ML"), default="REML")
        p.add_argument("--out", default=".", help="output directory")

    fit = sub.add_parser("fit", help="fit the model and write a summary")
    add_data_flags(fit)
    fit.set_defaults(func=cmd_fit)

    gof = sub.add_parser("gof", help="run goodness-of-fit tests")
    add_data_flags(gof)
    gof.add_argument("--scheme", choices=SCHEME_KINDS, default="refit-flip")
    gof.add_argument(
        "--law",
        choices=WEIGHT_LAWS,
        default=None,
        help="weight law (default: the scheme's own)",
    )
    gof.add_argument("--M", type=int, default=500, help="null replicates")
    gof.add_argument("--seed", type=int, default=0)
    gof.add_argument(
        "--process",
        action="append",
        metavar="O|F|Fsub:<cols>",
        help="process to test; repeatable (default: O and F)",
    )
    gof.add_argument("--variant", choices=("block", "full"), default="block")
    gof.add_argument(
        "--residuals", choices=("individual", "cluster"), default="individual"
    )
    gof.add_argument("--alpha", type=float, default=0.05)
    gof.add_argument("--workers", type=int, default=1)
    gof.set_defaults(func=cmd_gof)

    sim = sub.add_parser("simulate", help="run a Monte-Carlo study")
    sim.add_argument("--scenario", required=True, help="scenario JSON")
    sim.add_argument(
        "--seed", type=int, default=None, help="override the scenario seed"
    )
    sim.add_argument("--workers", type=int, default=1)
    sim.add_argument("--out", default=".")
    sim.set_defaults(func=cmd_simulate)
    return parser


def _load_model(path: str) -> ModelConfig:
    try:
        return ModelConfig.from_json(path)
    except KeyError as exc:
        raise ValueError(f"model config {path} is missing field {exc}") from exc


def _out_dir(arg: str) -> Path:
    out = Path(arg)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def cmd_fit(args) -> int:
    config = _load_model(args.model)
    ds = load_dataset(args.data, config)
    fit = fit_lmm(ds, method=args.method)
    payload = {
        "method": fit.method,
        "converged": bool(fit.converged),
        "n_iter": int(fit.n_iter),
        "loglik": float(fit.loglik),
        "n_clusters": ds.n,
        "n_observations": ds.N,
        "beta": {n: float(b) for n, b in zip(ds.fixed_names, fit.beta)},
        "sigma2": float(fit.vc.sigma2),
        "D": {
            "names": list(ds.random_names),
            "matrix": fit.vc.D.tolist(),
        },
        "boundary": bool(fit.boundary),
        "blups": {
            label: [float(v) for v in b]
            for label, b in zip(ds.labels, fit.blups)
        },
    }
    out = _out_dir(args.out)
    _write_json(out / "fit.json", payload)
    print(f"wrote {out / 'fit.json'}")
    print(
        f"{fit.method} loglik {fit.loglik:.4f}, sigma2 {fit.vc.sigma2:.4f},"
        f" converged: {fit.converged}"
    )
    return EXIT_OK


def _parse_processes(entries):
    """Turn repeated --process flags into (whiches, subset) for the runner."""
    if not entries:
        return ["O", "F"], None
    whiches: list[str] = []
    subset = None
    for entry in entries:
        if entry in ("O", "F"):
            whiches.append(entry)
        elif entry.startswith("Fsub:"):
            if subset is not None:
                raise ValueError("at most one Fsub:<cols> process per run")
            body = entry[len("Fsub:"):]
            try:
                subset = [int(tok) for tok in body.split(",") if tok]
            except ValueError:
                raise ValueError(
                    f"cannot parse column indices in {entry!r}"
                ) from None
            if not subset:
                raise ValueError("Fsub needs at least one column index")
            whiches.append("F-subset")
        else:
            raise ValueError(
                f"unknown process {entry!r}: use O, F, or Fsub:<cols>"
            )
    if len(set(whiches)) != len(whiches):
        raise ValueError("duplicate process requests")
    return whiches, subset


def workflow_hint(results: dict, alpha: float = 0.05) -> str:
    """Advisory reading of the p-values, checking the fixed part first.

    The overall process alone cannot say which part of the model is
    off; combined with the fixed-effects process it can.  This encodes
    that reading as a suggestion, not an automatic model revision.
    """
    sig = {w: min(r.p_ks, r.p_cvm) <= alpha for w, r in results.items()}
    fixed = [w for w in ("F", "F-subset") if w in sig]
    if not any(sig.values()):
        return (
            f"no evidence of lack of fit at level {alpha:g}; the observed "
            "processes are consistent with their null ensembles"
        )
    if sig.get("O") and fixed and not any(sig[w] for w in fixed):
        return (
            "the overall process rejects while the fixed-effects process "
            "does not: this points at the random-effects part of the model"
        )
    if any(sig[w] for w in fixed):
        return (
            "the fixed-effects part shows lack of fit; revise it first "
            "(column-subset processes help localize the covariate), then "
            "retest the whole model"
        )
    return (
        "the overall process rejects; test the fixed-effects process next "
        "to tell the fixed part from the random part"
    )


def cmd_gof(args) -> int:
    config = _load_model(args.model)
    ds = load_dataset(args.data, config)
    whiches, subset = _parse_processes(args.process)
    if args.M < MIN_REPLICATES:
        raise ValueError(
            f"--M {args.M} is too small to resolve a p-value;"
            f" use at least {MIN_REPLICATES}"
        )
    if args.M < RECOMMENDED_REPLICATES:
        print(
            f"warning: --M {args.M} gives coarse p-values"
            f" (grid step {1 / (args.M + 1):.3f});"
            f" {RECOMMENDED_REPLICATES} or more is recommended",
            file=sys.stderr,
        )
    scheme = NullScheme(args.scheme, law=args.law, M=args.M, seed=args.seed)
    fit = fit_lmm(ds, method=args.method)
    results = run_gof_many(
        ds,
        fit,
        whiches,
        scheme,
        variant=args.variant,
        flavor=args.residuals,
        subset=subset,
        workers=args.workers,
    )
    out = _out_dir(args.out)

    entries = []
    report = {}
    for which in whiches:
        res = results[which]
        entries.append((0, res.observed))
        entries.extend((m + 1, p) for m, p in enumerate(res.null_processes))
        obs = statistics(res.observed)
        report[which] = {
            "p_ks": res.p_ks,
            "p_cvm": res.p_cvm,
            "ks": obs.ks,
            "cvm": obs.cvm,
            "null_replicates": res.effective_M,
            "failed_replicates": res.failures,
        }
        save_gof_figure(res, out / f"gof_{which}.png")
    export_trace(out / "trace.csv", entries)
    hint = workflow_hint(results, args.alpha)
    _write_json(
        out / "gof.json",
        {
            "scheme": scheme.kind,
            "law": scheme.law,
            "M": scheme.M,
            "seed": scheme.seed,
            "method": fit.method,
            "variant": args.variant,
            "residuals": args.residuals,
            "alpha": args.alpha,
            "processes": report,
            "hint": hint,
        },
    )
    for which in whiches:
        res = results[which]
        note = (
            f" ({res.failures} null refits excluded)" if res.failures else ""
        )
        print(f"{which}: p_ks = {res.p_ks:.4g}, p_cvm = {res.p_cvm:.4g}{note}")
    print(f"hint: {hint}")
    print(f"wrote {out / 'gof.json'}, {out / 'trace.csv'}, and figures")
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = SimulationScenario.from_json(args.scenario)
    seed = sc.seed if args.seed is None else int(args.seed)
    out = _out_dir(args.out)
    start = time.perf_counter()
    table = run_study(sc, seed=seed, workers=args.workers)
    elapsed = time.perf_counter() - start
    table.to_csv(out / "rejections.csv")
    save_rejection_figure(table, out / "rejections.png")
    _write_json(
        out / "metadata.json",
        {
            "scenario": sc.name,
            "seed": seed,
            "R": sc.R,
            "M": sc.M,
            "schemes": list(sc.schemes),
            "alphas": list(sc.alphas),
            "workers": args.workers,
            "elapsed_seconds": round(elapsed, 3),
            "fit_failures": table.fit_failures,
            "ensemble_failures": table.ensemble_failures,
        },
    )
    print(
        f"wrote {out / 'rejections.csv'}"
        f" ({len(table.rows)} rows, {elapsed:.1f}s)"
    )
    for row in table.rows:
        if row.statistic == "cvm":
            print(
                f"  alpha={row.alpha:g} {row.scheme} {row.process}:"
                f" {row.proportion:.4f} (se {row.se:.4f})"
            )
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NoConvergence, NullRefitFailure, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (
        OSError,
        json.JSONDecodeError,
        DataError,
        ValueError,
        TypeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
