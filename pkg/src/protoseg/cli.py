"""Command-line entry point.

Subcommands: ``gen-data`` (synthesize a phantom dataset), ``train``,
``eval`` (metrics for a checkpoint on a split), ``ablate`` (matrix of
config overrides across seeds), and ``report`` (render loss curves and
metric tables from run logs). Every subcommand writes a
``run_manifest.json`` listing its output files; apart from the manifest
timestamp, identical invocations reproduce identical outputs.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import ProtosegError
from .metrics import MetricReport
from .synthdata import PhantomSpec, generate, load_dataset, write_dataset
from .trainkit import (
    RunConfig,
    Trainer,
    apply_overrides,
    config_to_flat,
    load_config,
    parse_matrix_file,
    run_ablation,
)


@dataclass
class ReportArtifact:
    """One file produced by a subcommand, as listed in the run manifest."""

    kind: str  # loss_curves | metric_table | ablation_table | dataset | checkpoint | log
    path: str
    format: str  # csv | json | image | raw | pt


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_manifest(out_dir: Path, command: str, args: dict,
                    artifacts: list[ReportArtifact]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "args": {k: v for k, v in args.items() if v is not None},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "files": [vars(a) for a in artifacts],
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected H,W,D, got {text!r}")
    return tuple(parts)


def _build_config(args) -> RunConfig:
    overrides: dict[str, object] = {}
    for item in args.set or []:
        if "=" not in item:
            raise ProtosegError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("seed", args.seed)
    if getattr(args, "iterations", None) is not None:
        overrides.setdefault("optimizer.iterations", args.iterations)
    if getattr(args, "method", None) is not None:
        overrides.setdefault("method", args.method)
    return load_config(args.config, overrides)


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #
def _cmd_gen_data(args) -> int:
    spec = PhantomSpec(task=args.task, volume_shape=_parse_shape(args.shape),
                       count=args.count, noise_std=args.noise_std, seed=args.seed)
    samples, split = generate(spec, labeled_fraction=args.labeled_fraction,
                              val_count=args.val_count)
    out = Path(args.out)
    manifest_path = write_dataset(samples, split, spec, out)
    artifacts = [ReportArtifact("dataset", str(manifest_path), "json")]
    _write_manifest(out, "gen-data", vars(args), artifacts)
    print(f"wrote {len(samples)} volumes to {out} "
          f"(labeled={len(split.labeled)}, unlabeled={len(split.unlabeled)}, "
          f"validation={len(split.validation)})")
    return 0


def _metric_csv_rows(reports: list[MetricReport]) -> list[dict]:
    rows = []
    for report in reports:
        rows.extend(report.csv_rows())
    return rows


def _write_metrics(out: Path, stem: str, reports: list[MetricReport],
                   aggregate: MetricReport) -> list[ReportArtifact]:
    csv_path = out / f"{stem}.csv"
    rows = _metric_csv_rows(reports)
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["volume_id", "class", "dice",
                                                "jaccard", "hd95", "asd"])
        writer.writeheader()
        writer.writerows(rows)
    json_path = out / f"{stem}.json"
    json_path.write_text(json.dumps({
        "aggregate": aggregate.to_json_dict(),
        "volumes": [r.to_json_dict() for r in reports],
    }, indent=2) + "\n")
    return [ReportArtifact("metric_table", str(csv_path), "csv"),
            ReportArtifact("metric_table", str(json_path), "json")]


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    if args.data is not None:
        cfg.data.root = args.data
    samples, split, manifest = load_dataset(cfg.data.root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in sorted(config_to_flat(cfg).items())))
    trainer = Trainer(cfg, samples, split, classes=manifest["classes"])
    trainer.run(out_dir=out, progress=not args.quiet)
    reports, aggregate = trainer.evaluate(split.validation)
    artifacts = [
        ReportArtifact("log", str(out / "train_log.csv"), "csv"),
        ReportArtifact("log", str(out / "eval_log.csv"), "csv"),
        ReportArtifact("checkpoint", str(out / "checkpoint_last.pt"), "pt"),
        ReportArtifact("log", str(out / "config.txt"), "csv"),
    ]
    artifacts += _write_metrics(out, "metrics_validation", reports, aggregate)
    _write_manifest(out, "train", {k: v for k, v in vars(args).items() if k != "func"},
                    artifacts)
    print(f"finished {trainer.t} iterations; validation mean dice "
          f"{aggregate.mean.dice:.4f}")
    return 0


def _cmd_eval(args) -> int:
    samples = split = None
    if args.data is not None:
        samples, split, _ = load_dataset(args.data)
    trainer = Trainer.restore(args.checkpoint, samples=samples, split=split)
    split = trainer.split
    ids = getattr(split, args.split)
    if not ids:
        raise ProtosegError(f"split {args.split!r} is empty")
    reports, aggregate = trainer.evaluate(ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = _write_metrics(out, f"metrics_{args.split}", reports, aggregate)
    _write_manifest(out, "eval", {k: v for k, v in vars(args).items() if k != "func"},
                    artifacts)
    print(f"{args.split}: mean dice {aggregate.mean.dice:.4f} over {len(ids)} volumes")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _build_config(args)
    matrix = parse_matrix_file(args.matrix)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    spec_shape = _parse_shape(args.shape)

    cache: dict[int, tuple] = {}

    def make_data(seed: int):
        if seed not in cache:
            spec = PhantomSpec(task=args.task, volume_shape=spec_shape,
                               count=args.count, noise_std=args.noise_std, seed=seed)
            samples, split = generate(spec, labeled_fraction=args.labeled_fraction,
                                      val_count=args.val_count)
            cache[seed] = ({s.id: s for s in samples}, split, spec.classes)
        return cache[seed]

    out = Path(args.out)
    table = run_ablation(cfg, matrix, seeds, make_data, out_dir=out,
                         progress=not args.quiet)
    artifacts = [ReportArtifact("ablation_table", str(out / "ablation.csv"), "csv"),
                 ReportArtifact("ablation_table", str(out / "ablation.json"), "json")]
    _write_manifest(out, "ablate", {k: v for k, v in vars(args).items() if k != "func"},
                    artifacts)
    for row in table:
        print(f"{row['name']}: dice {row['dice_mean']:.4f} +/- {row['dice_std']:.4f}")
    return 0


def _cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    artifacts: list[ReportArtifact] = []

    train_log = run_dir / "train_log.csv"
    if train_log.exists():
        with train_log.open() as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
        steps = [int(r["step"]) for r in rows]
        fig, axes = plt.subplots(1, 2, figsize=(11, 4))
        for key in ("total", "l_seg_l", "l_seg_m"):
            axes[0].plot(steps, [float(r[key]) for r in rows], label=key)
        axes[0].set_xlabel("step"); axes[0].set_ylabel("loss")
        axes[0].legend(); axes[0].set_title("supervised terms")
        for key in ("l_lc", "l_uc", "lambda_con"):
            axes[1].plot(steps, [float(r[key]) for r in rows], label=key)
        axes[1].set_xlabel("step"); axes[1].legend()
        axes[1].set_title("consistency terms")
        fig.tight_layout()
        curves_path = out / "loss_curves.png"
        fig.savefig(curves_path, dpi=110)
        plt.close(fig)
        artifacts.append(ReportArtifact("loss_curves", str(curves_path), "image"))

    eval_log = run_dir / "eval_log.csv"
    if eval_log.exists():
        table_csv = out / "metric_table.csv"
        table_csv.write_text(eval_log.read_text())
        with eval_log.open() as fh:
            rows = list(csv.DictReader(fh))
        (out / "metric_table.json").write_text(json.dumps(rows, indent=2) + "\n")
        artifacts.append(ReportArtifact("metric_table", str(table_csv), "csv"))
        artifacts.append(ReportArtifact("metric_table", str(out / "metric_table.json"),
                                        "json"))

    if not artifacts:
        raise ProtosegError(f"no logs found under {run_dir}")
    _write_manifest(out, "report", {k: v for k, v in vars(args).items() if k != "func"},
                    artifacts)
    print(f"wrote {len(artifacts)} report artifact(s) to {out}")
    return 0


# --------------------------------------------------------------------------- #
def build_parser() -> _Parser:
    parser = _Parser(prog="protoseg",
                     description="semi-supervised 3D segmentation workbench")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--task", choices=("ellipsoid", "nested_tubes"), default="ellipsoid")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", default="32,32,32", help="H,W,D")
    p.add_argument("--noise-std", type=float, default=0.6)
    p.add_argument("--labeled-fraction", type=float, default=0.2)
    p.add_argument("--val-count", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None, help="dotted-key config file")
    p.add_argument("--data", default=None, help="dataset root (overrides data.root)")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--method", choices=("semi", "supervised"), default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="dataset root if not stored in config")
    p.add_argument("--split", choices=("validation", "labeled", "unlabeled"),
                   default="validation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run a matrix of config overrides")
    p.add_argument("--matrix", required=True, help="file: <name> key=value ...")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--task", choices=("ellipsoid", "nested_tubes"), default="ellipsoid")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--shape", default="32,32,32")
    p.add_argument("--noise-std", type=float, default=0.6)
    p.add_argument("--labeled-fraction", type=float, default=0.2)
    p.add_argument("--val-count", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("report", help="render loss curves and metric tables")
    p.add_argument("--run", required=True, help="directory with train/eval logs")
    p.add_argument("--out", default=None, help="output directory (default: run dir)")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ProtosegError, OSError, ValueError) as exc:
        print(f"protoseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
