"""Batch command line: ``covreserve {synth,fit,simulate,compare,stability}``.

Every run writes ``config.json`` (all resolved options) into its output
directory.  Failures write ``error.json`` and exit with status 2 (known
errors) or 1 (anything else).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import independence_reserving, odp_reserves
from .bundle import FittedModelBundle, fit_bundle, fit_independence_bundle
from .domain import DEFAULT_J_STAR
from .errors import ConfigurationError, ReservingError
from .ingestion import CovariateSchema, infer_schema, parse_claims, write_claims
from .simulation import (
    IbnrSpec,
    SimulationConfig,
    run_reserving,
    stability_curve,
    summarize,
    write_distribution_csv,
    write_histogram_csv,
)
from .synthgen import default_truth, generate_portfolio, truncate_at, write_truth

log = logging.getLogger("covreserve")

OUTPUT_ENV = "COVRESERVE_OUTPUT_DIR"
DEFAULT_EVAL = "2018-01-01"


# --- helpers -----------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _counts(text: str) -> dict[int, int]:
    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        try:
            k, v = part.split("=")
            out[int(k)] = int(v)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected YEAR=COUNT pairs, got {part!r}") from None
    return out


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, default=_default)
        fh.write("\n")


def _default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _coverages(args) -> tuple[str, ...]:
    return tuple(c.strip() for c in args.coverages.split(",") if c.strip())


def _load_claims(args):
    return parse_claims(_require(args.claims), _coverages(args))


def _schema(args, portfolio):
    if getattr(args, "schema", None):
        return CovariateSchema.load(_require(args.schema))
    return infer_schema(portfolio)


def _table(rows: list[dict], cols: list[str]) -> str:
    widths = [max(len(c), *(len(_cell(r.get(c))) for r in rows)) for c in cols]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(_cell(r.get(c)).rjust(w) if isinstance(r.get(c), (int, float)) else _cell(r.get(c)).ljust(w)
                               for c, w in zip(cols, widths)))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:,.2f}"
    return str(v)


def _write_rows_csv(path: Path, rows: list[dict], cols: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join("" if r.get(c) is None else repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")


def _sim_config(args) -> SimulationConfig:
    ibnr = IbnrSpec(args.ibnr_counts) if args.ibnr_counts else IbnrSpec()
    return SimulationConfig(
        eval_date=args.eval_date,
        n_replications=args.n_replications,
        seed=args.seed,
        horizon=args.horizon,
        ibnr=ibnr,
        workers=args.workers,
        parameter_draws=args.parameter_draws,
    )


# --- subcommands ---------------------------------------------------------------

def cmd_synth(args, out: Path) -> dict:
    truth = default_truth(
        j_star=args.j_star,
        p_close=args.p_close,
        covariate_effects=not args.intercept_only,
        occurrence_years=tuple(range(args.first_year, args.last_year + 1)),
    )
    full = generate_portfolio(truth, args.n_claims, args.seed)
    observed, holdout = truncate_at(full, args.eval_date)
    write_claims(full, out / "claims_full.csv")
    write_claims(observed, out / "claims.csv")
    truth.schema.save(out / "schema.json")
    write_truth(truth, out / "truth.json", holdout, {"eval_date": args.eval_date, "seed": args.seed, "n_claims": args.n_claims})
    return {"n_claims": full.n_claims, "n_observed": observed.n_claims, "holdout": holdout.series()}


def cmd_fit(args, out: Path) -> dict:
    portfolio = _load_claims(args)
    schema = _schema(args, portfolio)
    kwargs = dict(j_star=args.j_star, horizon=args.horizon, buckets=args.buckets, criterion=args.criterion, ridge=args.ridge)
    bundle = fit_bundle(portfolio, schema, args.eval_date, **kwargs)
    bundle.save(out / "bundle.json")
    schema.save(out / "schema.json")
    conv = bundle.convergence_report()
    _json(out / "convergence.json", conv)
    cols = ["period", "model", "coverage", "method", "iterations", "grad_norm", "loglik", "converged"]
    (out / "convergence.txt").write_text(_table(conv, cols), encoding="utf-8")
    sel = [dict(r) for r in bundle.selection]
    _json(out / "selection.json", sel)
    if sel:
        cols = ["period", "coverage", "family", "n", "loglik", "k", "aic", "bic", "selected", "status"]
        _write_rows_csv(out / "selection.csv", sel, cols)
        (out / "selection.txt").write_text(_table(sel, cols), encoding="utf-8")
    return {"bundle": str(out / "bundle.json"), "n_models": len(conv)}


def _load_bundle(args) -> FittedModelBundle:
    return FittedModelBundle.load(args.bundle)


def _summary_rows(summary: dict, model: str | None = None) -> list[dict]:
    rows = []
    for name, s in summary.items():
        row = {"model": model, "series": name, "mean": s["mean"], "VaR": s["VaR"]}
        rows.append(row if model else {k: v for k, v in row.items() if k != "model"})
    return rows


def cmd_simulate(args, out: Path) -> dict:
    bundle = _load_bundle(args)
    portfolio = _load_claims(args)
    dist = run_reserving(portfolio, bundle, _sim_config(args))
    write_distribution_csv(dist, out / "distribution.csv")
    write_histogram_csv(dist, out / "histogram.csv", bins=args.bins)
    summary = summarize(dist, args.q)
    _json(out / "summary.json", {"q": args.q, "series": summary, "metadata": dict(dist.metadata), "warnings": list(dist.warnings)})
    (out / "summary.txt").write_text(_table(_summary_rows(summary), ["series", "mean", "VaR"]), encoding="utf-8")
    return {"total_mean": summary["total"]["mean"], "total_VaR": summary["total"]["VaR"]}


def cmd_compare(args, out: Path) -> dict:
    bundle = _load_bundle(args)
    portfolio = _load_claims(args)
    config = _sim_config(args)
    pattern = summarize(run_reserving(portfolio, bundle, config), args.q)
    ind_bundle = fit_independence_bundle(
        portfolio, bundle.schema, args.eval_date, j_star=bundle.j_star, horizon=bundle.horizon,
        buckets=bundle.buckets, reuse=bundle,
    )
    independence = summarize(independence_reserving(portfolio, ind_bundle, config), args.q)
    odp = odp_reserves(portfolio, args.eval_date, args.n_boot, args.seed, workers=args.workers)
    rows = []
    names = list(bundle.coverages) + ["total"]
    for model, summ in (("pattern", pattern), ("independence", independence)):
        rows += [r for r in _summary_rows(summ, model) if r["series"] in names]
    for name in names:
        s = odp[name].summary(args.q)
        rows.append({"model": "ODP", "series": name, "mean": s["mean"], "VaR": s["VaR"]})
    _json(out / "comparison.json", {"q": args.q, "rows": rows})
    _write_rows_csv(out / "comparison.csv", rows, ["model", "series", "mean", "VaR"])
    (out / "comparison.txt").write_text(_table(rows, ["model", "series", "mean", "VaR"]), encoding="utf-8")
    return {"rows": len(rows)}


def cmd_stability(args, out: Path) -> dict:
    bundle = _load_bundle(args)
    portfolio = _load_claims(args)
    config = _sim_config(args)
    curve = stability_curve(portfolio, bundle, config, args.checkpoints, q=args.q, series=args.series)
    _json(out / "stability.json", {"q": args.q, "series": args.series, "curve": curve})
    _write_rows_csv(out / "stability.csv", curve, ["n", "VaR", "rel_change"])
    return {"final_rel_change": curve[-1]["rel_change"]}


COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "stability": cmd_stability,
}


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covreserve", description="Individual claims reserving with coverage activation patterns.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, claims=True):
        sp.add_argument("--out", default=None, help=f"output directory (default ./covreserve-<command>; ${OUTPUT_ENV} overrides)")
        sp.add_argument("--eval-date", default=DEFAULT_EVAL)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("-v", "--verbose", action="store_true")
        if claims:
            sp.add_argument("--claims", required=True, help="claims CSV")
            sp.add_argument("--coverages", default="AB,BI,VD,LoU", help="coverage names in CSV order")

    def simulation(sp):
        sp.add_argument("--bundle", required=True, help="fitted model bundle (bundle.json)")
        sp.add_argument("--n-replications", type=_positive, default=5000)
        sp.add_argument("--horizon", type=_positive, default=None, help="maximum simulated development year J")
        sp.add_argument("--workers", type=_positive, default=1)
        sp.add_argument("--parameter-draws", type=int, default=0, help="coefficient draws for estimation risk (0: plug-in)")
        sp.add_argument("--ibnr-counts", type=_counts, default=None, help="explicit IBNR counts, e.g. 2016=40,2017=300")
        sp.add_argument("--q", type=float, default=0.95)

    s = sub.add_parser("synth", help="generate a synthetic portfolio")
    common(s, claims=False)
    s.add_argument("--n-claims", type=_positive, default=20000)
    s.add_argument("--j-star", type=int, default=DEFAULT_J_STAR)
    s.add_argument("--p-close", type=float, default=0.7)
    s.add_argument("--first-year", type=int, default=2014)
    s.add_argument("--last-year", type=int, default=2017)
    s.add_argument("--intercept-only", action="store_true")

    f = sub.add_parser("fit", help="fit the activation, payment and severity models")
    common(f)
    f.add_argument("--schema", default=None, help="covariate schema JSON (inferred from the data if omitted)")
    f.add_argument("--j-star", type=int, default=DEFAULT_J_STAR)
    f.add_argument("--horizon", type=_positive, default=10)
    f.add_argument("--buckets", type=_int_list, default=[1, 2], help="first development year of each period bucket")
    f.add_argument("--criterion", choices=("AIC", "BIC"), default="AIC")
    f.add_argument("--ridge", type=float, default=0.0)

    m = sub.add_parser("simulate", help="simulate the reserve distribution")
    common(m)
    simulation(m)
    m.add_argument("--bins", type=_positive, default=50)

    c = sub.add_parser("compare", help="pattern model vs independence model vs ODP chain ladder")
    common(c)
    simulation(c)
    c.add_argument("--n-boot", type=_positive, default=10000)

    st = sub.add_parser("stability", help="VaR against the number of replications")
    common(st)
    simulation(st)
    st.add_argument("--checkpoints", type=_int_list, default=[1000, 2500, 5000])
    st.add_argument("--series", default="total")
    return p


def _output_dir(args) -> Path:
    base = os.environ.get(OUTPUT_ENV) or args.out or f"covreserve-{args.command}"
    out = Path(base)
    out.mkdir(parents=True, exist_ok=True)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = _output_dir(args)
    config = {k: v for k, v in vars(args).items()}
    config.update(output_dir=str(out), version=__version__)
    _json(out / "config.json", config)
    try:
        result = COMMANDS[args.command](args, out)
    except (ReservingError, FileNotFoundError, ConfigurationError, ValueError) as exc:
        record = exc.to_record() if isinstance(exc, ReservingError) else {"error": type(exc).__name__, "message": str(exc)}
        record["command"] = args.command
        _json(out / "error.json", record)
        print(json.dumps(record), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort error record
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        _json(out / "error.json", record)
        print(json.dumps(record), file=sys.stderr)
        return 1
    _json(out / "result.json", result)
    print(json.dumps(result, default=_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
