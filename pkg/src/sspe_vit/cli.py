"""Command line entry point.

Subcommands::

    gen-data  --config cfg.json --out DIR              synthetic corpus + manifest
    train     --config cfg.json --out DIR [--data DIR] report, checkpoint, log
    eval      --checkpoint FILE --data DIR --out DIR   metrics on one split
    ablate    --suite NAME --config cfg.json --out DIR ablation CSV tables
    report    --in DIR [--out DIR]                     mean/sd summary of ablation CSVs

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .data import DatasetManifest, generate_synthetic
from .encoder import load_checkpoint, save_checkpoint
from .harness import (
    CSV_HEADER,
    DEFAULT_SEEDS,
    SUITES,
    evaluate,
    read_suite_csv,
    run_ablation,
    summarize,
    train,
    write_rows_csv,
)

log = logging.getLogger("sspe_vit")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sspe-vit", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--out", required=out_required, help="output directory")

    common(sub.add_parser("gen-data", help="generate the synthetic dataset"))

    t = sub.add_parser("train", help="train one model")
    common(t)
    t.add_argument("--data", help="dataset directory (overrides data_dir)")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="run an ablation suite")
    common(a)
    a.add_argument("--suite", required=True, choices=SUITES)
    a.add_argument("--data", help="dataset directory (overrides data_dir)")
    a.add_argument("--seeds", default=",".join(map(str, DEFAULT_SEEDS)), help="comma-separated seeds")

    r = sub.add_parser("report", help="summarize ablation CSV files")
    r.add_argument("--in", dest="in_dir", required=True)
    r.add_argument("--out", help="where to write summary.csv (default: --in)")
    return p


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = list(args.overrides)
    if getattr(args, "data", None):
        overrides.append(f"data_dir={args.data}")
    return cfg.with_overrides(overrides) if overrides else cfg


def _cmd_gen_data(args) -> None:
    cfg = _load_config(args)
    m = generate_synthetic(cfg.synthetic, args.out)
    print(f"wrote {len(m.entries)} images and manifest to {args.out}")


def _cmd_train(args) -> None:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.read(cfg.data_dir)
    tag = f"seed{cfg.seed}"
    params, report = train(cfg, manifest, log_path=out / f"train_log_{tag}.jsonl")
    save_checkpoint(params, out / f"checkpoint_{tag}.bin", extra={"experiment": cfg.to_dict()})
    (out / f"report_{tag}.json").write_text(report.to_json(), encoding="utf-8")
    (out / f"config_{tag}.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    (out / f"timing_{tag}.json").write_text(
        json.dumps({"runtime_seconds": report.runtime_seconds}) + "\n", encoding="utf-8"
    )
    print(f"test accuracy {report.accuracy:.4f}  F1 {report.f1:.4f}  -> {out}")


def _cmd_eval(args) -> None:
    params, extra = load_checkpoint(args.checkpoint)
    mask = extra.get("experiment", {}).get("mask_cells", [])
    report = evaluate(params, DatasetManifest.read(args.data), args.split, mask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = Path(args.checkpoint).stem.replace("checkpoint", "eval")
    (out / f"{name}_{args.split}.json").write_text(report.to_json(), encoding="utf-8")
    print(f"{args.split} accuracy {report.accuracy:.4f}  F1 {report.f1:.4f}")


def _cmd_ablate(args) -> None:
    cfg = _load_config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --seeds {args.seeds!r}") from exc
    manifest = DatasetManifest.read(cfg.data_dir)
    results = run_ablation(args.suite, cfg, manifest, seeds, out_dir=args.out)
    for cond, stats in summarize(results).items():
        print(f"{cond:40s} acc {stats['accuracy_mean']:.4f} ± {stats['accuracy_sd']:.4f}")


def _cmd_report(args) -> None:
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out) if args.out else in_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in sorted(in_dir.glob("*.csv")):
        with open(path, encoding="utf-8") as fh:
            if fh.readline().strip() != ",".join(CSV_HEADER):
                continue
        suite = path.stem
        for cond, stats in summarize(read_suite_csv(path)).items():
            rows.append({"suite": suite, "condition": cond, **stats})
            print(f"{suite:12s} {cond:40s} acc {stats.get('accuracy_mean', float('nan')):.4f}"
                  f" ± {stats.get('accuracy_sd', float('nan')):.4f}  (n={stats['n']})")
    if not rows:
        raise FileNotFoundError(f"no ablation CSV files in {in_dir}")
    header = ["suite", "condition", "n", "accuracy_mean", "accuracy_sd", "f1_mean", "f1_sd",
              "epochs_to_90pct_mean", "epochs_to_90pct_sd"]
    write_rows_csv(out_dir / "summary.csv", rows, header)


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure past config parsing is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
