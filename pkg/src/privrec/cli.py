"""Command-line entry point: ingest, train, sweep, report, verify."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment, verify
from .dataset import DataError

EXIT_OK, EXIT_RUN_FAILURE, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("privrec")


class UsageError(Exception):
    pass


def _config_help() -> str:
    lines = ["configuration keys (JSON sections; override with --override key=value):"]
    for key, default in experiment.config_keys():
        lines.append(f"  {key:32s} default: {json.dumps(default)}")
    lines.append("environment: PRIVREC_OUTPUT_DIR overrides output_dir, PRIVREC_WORKERS overrides workers")
    return "\n".join(lines)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; defaults are used for missing keys")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set one config key, e.g. model.kind=BPR (repeatable)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="privrec", description=__doc__, epilog=_config_help(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse raw files, print dataset statistics, write the cache",
                       epilog=_config_help(), formatter_class=fmt)
    _common(p)

    p = sub.add_parser("train", help="train and evaluate one (budget, seed) run",
                       epilog=_config_help(), formatter_class=fmt)
    _common(p)
    p.add_argument("--budget", type=float, help="epsilon (ldp) or noise multiplier (dpsgd); default: first budget")
    p.add_argument("--seed", type=int, help="default: first configured seed")
    p.add_argument("--non-private", action="store_true", help="run the regime-none baseline")

    p = sub.add_parser("sweep", help="run every budget x seed, aggregate, write reports",
                       epilog=_config_help(), formatter_class=fmt)
    _common(p)

    p = sub.add_parser("report", help="write CSV tables and SVG charts from stored run records",
                       epilog=_config_help(), formatter_class=fmt)
    _common(p)
    p.add_argument("--records", help="records directory (default: <output_dir>/records)")
    p.add_argument("--out", help="report directory (default: <output_dir>/reports)")

    p = sub.add_parser("verify", help="run the built-in property suites")
    p.add_argument("--suite", action="append", choices=list(verify.SUITES), help="run only this suite (repeatable)")
    p.add_argument("--mutate", choices=verify.MUTATIONS, help="break one component on purpose")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")
    return parser


def load_config(args) -> experiment.ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
    return experiment.ExperimentConfig.load(args.config, args.override)


def _require_files(*paths: str) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise UsageError(f"input file not found: {p}")


def _dataset_files(cfg: experiment.ExperimentConfig) -> tuple[str, str]:
    d = cfg.dataset
    return (d.ratings_path, d.movies_path) if d.name == "movielens" else (d.review_path, d.business_path)


def cmd_ingest(args) -> int:
    cfg = load_config(args)
    _require_files(*_dataset_files(cfg))
    store = experiment.load_store(cfg.dataset, cfg.cache_dir())
    s = store.stats()
    print(f"{'dataset':10s} {'#users':>8s} {'#items':>8s} {'#interactions':>14s} {'density':>9s} "
          f"{'#categories':>11s} {'cats/item (min/mean/max)':>25s}")
    print(f"{cfg.dataset.name:10s} {s['users']:>8,d} {s['items']:>8,d} {s['interactions']:>14,d} "
          f"{s['density']:>9.4%} {s['categories']:>11d} "
          f"{s['min_categories_per_item']:>9d} / {s['mean_categories_per_item']:.2f} / {s['max_categories_per_item']:d}")
    print(f"cache: {cfg.cache_dir()}")
    return EXIT_OK


def _summary_line(rec: experiment.RunRecord) -> str:
    m = rec.metrics or {}
    vals = " ".join(f"{k}={m[k]:.4f}" for k in ("ndcg", "kld", "popularity_lift", "novelty", "coverage", "dpf")
                    if m.get(k) is not None)
    eps = rec.realized_epsilon if isinstance(rec.realized_epsilon, str) else f"{rec.realized_epsilon:.4g}"
    return (f"{rec.model} {rec.regime} budget={rec.budget} seed={rec.seed} status={rec.status} "
            f"eps={eps} epochs={rec.epochs} {vals}")


def cmd_train(args) -> int:
    cfg = load_config(args)
    _require_files(*_dataset_files(cfg))
    if args.non_private or cfg.privacy.regime == "none":
        regime, budget = "none", None
    else:
        regime = cfg.privacy.regime
        budget = args.budget if args.budget is not None else float(cfg.privacy.budgets[0])
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    rec = experiment.run_one(cfg, regime, budget, seed)
    print(_summary_line(rec))
    print(f"record: {experiment.records_dir(cfg) / (rec.fingerprint + '.json')}")
    if rec.status != "ok":
        print(rec.error, file=sys.stderr)
        return EXIT_RUN_FAILURE
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .report import report

    cfg = load_config(args)
    _require_files(*_dataset_files(cfg))
    result = experiment.sweep(cfg)
    for rec in sorted(result.records, key=lambda r: (r.regime, r.budget or 0.0, r.seed)):
        print(_summary_line(rec))
    failed = [r for r in result.records if r.status != "ok"]
    if len(failed) < len(result.records):
        report(result.records, Path(cfg.output_dir) / "reports")
    print(f"{len(result.records)} records ({result.skipped} reused, {len(failed)} failed) in {cfg.output_dir}")
    return EXIT_RUN_FAILURE if failed else EXIT_OK


def cmd_report(args) -> int:
    from .report import report

    cfg = load_config(args)
    rdir = Path(args.records) if args.records else experiment.records_dir(cfg)
    if not rdir.is_dir():
        raise UsageError(f"records directory not found: {rdir}")
    records = experiment.load_records(rdir)
    if not any(r.status == "ok" for r in records):
        raise UsageError(f"no successful run records in {rdir}")
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "reports"
    paths = report(records, out)
    print(f"wrote {len(paths)} files to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_suites(args.suite, args.mutate)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:24s} {r.checks:5d} checks  {r.seconds:7.2f}s")
        for f in r.failures[:5]:
            print(f"      {f}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failing suites: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUN_FAILURE
    print("all suites passed")
    return EXIT_OK


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "sweep": cmd_sweep, "report": cmd_report, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, experiment.ConfigError) as exc:
        print(f"privrec {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"privrec {args.command}: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"privrec {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
