"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fhe
from .attack import SweepRow, attack_sweep
from .runtime.config import (
    ConfigError,
    dump_config,
    load_attack_config,
    load_federation_config,
)
from .runtime.federation import METRIC_COLUMNS, FederationError, metrics_csv, run_experiment
from .training import MlpSpec

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("blindfl")


def _seed(value: str) -> int:
    n = int(value, 0)
    if not 0 <= n < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blindfl", description="Federated learning with model segmentation and HE.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, type=Path, help="YAML configuration file")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--seed", type=_seed, help="override the configured seed")
        p.add_argument("--deterministic", action="store_true", help="zero wall-time columns")
        p.add_argument("--verbose", "-v", action="store_true")

    common(sub.add_parser("run", help="run a federation and write per-round metrics"))
    common(sub.add_parser("attack", help="sweep gradient-subset inversion over n"))
    rep = sub.add_parser("report", help="compare metrics CSVs")
    rep.add_argument("metrics", nargs="+", type=Path)
    rep.add_argument("--verbose", "-v", action="store_true")
    common(sub.add_parser("keys", help="generate and store a key pair"))
    return parser


def _prepare_out(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)


def cmd_run(args) -> int:
    cfg = load_federation_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    deterministic = args.deterministic or cfg.deterministic
    _prepare_out(args.out)
    metrics_path = args.out / "metrics.csv"
    rows = []

    def flush(m=None):
        if m is not None:
            rows.append(m)
        metrics_path.write_text(metrics_csv(rows, deterministic))

    try:
        metrics = run_experiment(cfg, on_round=flush)
    except FederationError as exc:
        flush()
        log.error("run failed: %s", exc)
        return EXIT_RUNTIME
    summary = {
        "run_type": cfg.run_type,
        "rounds": len(metrics),
        "final_accuracy": metrics[-1].mean_accuracy,
        "total_bytes_up": int(sum(sum(m.bytes_up.values()) for m in metrics)),
        "total_bytes_down": int(sum(sum(m.bytes_down.values()) for m in metrics)),
        "mean_agg_time_ms": 0.0 if deterministic else float(np.mean([m.agg_time_ms for m in metrics])),
    }
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (args.out / "config.yaml").write_text(dump_config(cfg))
    print(f"{cfg.run_type}: {len(metrics)} rounds, final mean accuracy {summary['final_accuracy']:.4f}")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = load_attack_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    spec = MlpSpec(cfg.widths, cfg.activation)
    rows = attack_sweep(spec, cfg.sweep, cfg.trials, np.random.default_rng(cfg.seed), cfg.noise_std)
    _prepare_out(args.out)
    with open(args.out / "attack.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SweepRow.COLUMNS)
        for r in rows:
            w.writerow(r.as_row())
    for r in rows:
        print(f"n={r.n}/{r.N}  S'={r.mean_S_prime:.4g}  recovered={r.recovery_success_rate:.2f}")
    return EXIT_OK


class ReportError(ValueError):
    pass


def read_metrics(path: Path) -> list[dict]:
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise ReportError(f"{path}: {exc.strerror}") from None
    if not rows or tuple(rows[0]) != METRIC_COLUMNS:
        raise ReportError(f"{path}: header does not match the metrics schema")
    body = rows[1:]
    if not body:
        raise ReportError(f"{path}: no rounds")
    for k, r in enumerate(body, start=2):
        if len(r) != len(METRIC_COLUMNS):
            raise ReportError(f"{path}: line {k} has {len(r)} fields, expected {len(METRIC_COLUMNS)}")
    try:
        return [{c: float(v) for c, v in zip(METRIC_COLUMNS, r)} for r in body]
    except ValueError as exc:
        raise ReportError(f"{path}: {exc}") from None


def report_table(paths) -> str:
    header = ("run", "rounds", "final_acc", "mean_agg_ms", "bytes_up_mean", "bytes_down_mean")
    lines = [header]
    for path in paths:
        rows = read_metrics(Path(path))
        lines.append(
            (
                Path(path).stem if Path(path).stem != "metrics" else Path(path).parent.name,
                str(len(rows)),
                f"{rows[-1]['mean_accuracy']:.4f}",
                f"{np.mean([r['agg_time_ms'] for r in rows]):.2f}",
                f"{np.mean([r['bytes_up_mean'] for r in rows]):.0f}",
                f"{np.mean([r['bytes_down_mean'] for r in rows]):.0f}",
            )
        )
    widths = [max(len(row[k]) for row in lines) for k in range(len(header))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in lines)


def cmd_report(args) -> int:
    print(report_table(args.metrics))
    return EXIT_OK


def cmd_keys(args) -> int:
    cfg = load_federation_config(args.config)
    params = cfg.fhe_params()
    if params is None:
        raise ConfigError("fhe: key generation needs fhe set to oracle or ckks")
    seed = cfg.seed if args.seed is None else args.seed
    keys = fhe.keygen(params, np.random.default_rng(seed), 1)
    _prepare_out(args.out)
    (args.out / "public.key").write_bytes(fhe.serialize_public_key(keys.public))
    (args.out / "secret.key").write_bytes(fhe.serialize_secret_key(keys.secret))
    print(fhe.key_fingerprint(keys.public).hex())
    return EXIT_OK


COMMANDS = {"run": cmd_run, "attack": cmd_attack, "report": cmd_report, "keys": cmd_keys}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level guard maps failures to exit 1
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
