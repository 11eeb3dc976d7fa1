"""Command-line front end: train, export, bench, sensitivity, ablate.

Exit codes: 0 success, 1 usage/config error, 2 runtime/numerical error.
``LT3R_OUT`` overrides ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .analysis import model_report, reports_csv, reports_json, sensitivity_csv, sensitivity_json
from .checkpoint import ArchiveError, load_model, save_model
from .config import ConfigError, RunConfig, load_config
from .distill import TrainingDiverged
from .qlinear import export_model


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser():
    p = _Parser(prog="slaqat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="run configuration JSON (defaults if omitted)")
        sp.add_argument("--out", default="runs", help="output root directory")
        sp.add_argument("--seed", type=int, help="override train.seed")
        sp.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
        return sp

    common(sub.add_parser("train", help="run FP8-aware QAT and write student checkpoint + log"))
    ex = common(sub.add_parser("export", help="convert a checkpoint to weight-only FP8"), config=False)
    ex.add_argument("checkpoint")
    ex.add_argument("--output", help="destination file (default: <run dir>/student_fp8.lt3r)")
    common(sub.add_parser("bench", help="efficiency report for dense / SLA / FP8 variants"))
    se = common(sub.add_parser("sensitivity", help="per-layer quantization sensitivity"), config=False)
    se.add_argument("checkpoint")
    common(sub.add_parser("ablate", help="SLA on/off x QAT on/off table"))
    return p


def _run_dir(args, command):
    root = Path(os.environ.get("LT3R_OUT") or args.out)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = root / f"{command}-{stamp}"
    n = 1
    while path.exists():
        n += 1
        path = root / f"{command}-{stamp}-{n}"
    path.mkdir(parents=True)
    return path


def _config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _write(path, text):
    Path(path).write_text(text, encoding="utf-8")


def cmd_train(args):
    cfg = _config(args)
    teacher, student, log = pipeline.train(cfg)
    out = _run_dir(args, "train")
    _write(out / "config.json", json.dumps(cfg.to_dict(), indent=1))
    meta = {"train": cfg.to_dict()["train"]}
    save_model(out / "teacher.lt3r", teacher, meta)
    save_model(out / "student.lt3r", student, meta)
    _write(out / "train_log.json", log.to_json())
    _write(out / "train_log.csv", log.steps_csv())
    _write(out / "timing.json", json.dumps({"epoch_wall_s": log.wall_times}))
    print(out)
    return 0


def cmd_export(args):
    model, meta = load_model(args.checkpoint)
    export_model(model)
    if args.output:
        dest = Path(args.output)
        dest.parent.mkdir(parents=True, exist_ok=True)
    else:
        dest = _run_dir(args, "export") / "student_fp8.lt3r"
    if dest.exists() and dest.resolve() == Path(args.checkpoint).resolve():
        raise UsageError("refusing to overwrite the input checkpoint")
    extra = {k: v for k, v in meta.items()
             if k not in ("model", "kind", "keep_ratio", "fake_quant", "act_quant", "weight_only")}
    save_model(dest, model, extra)
    print(dest)
    return 0


def cmd_bench(args):
    cfg = _config(args)
    reports, reference = pipeline.bench(cfg)
    out = _run_dir(args, "bench")
    _write(out / "config.json", json.dumps(cfg.to_dict(), indent=1))
    doc = json.loads(reports_json(reports))
    doc["reference"] = reference
    _write(out / "bench.json", json.dumps(doc, indent=1))
    _write(out / "bench.csv", reports_csv(reports))
    print(out)
    return 0


def cmd_sensitivity(args):
    model, _ = load_model(args.checkpoint)
    report = model_report(model)
    out = _run_dir(args, "sensitivity")
    _write(out / "sensitivity.json", sensitivity_json(report))
    _write(out / "sensitivity.csv", sensitivity_csv(report))
    print(out)
    return 0


def cmd_ablate(args):
    cfg = _config(args)
    rows = pipeline.ablate(cfg)
    out = _run_dir(args, "ablate")
    _write(out / "config.json", json.dumps(cfg.to_dict(), indent=1))
    _write(out / "ablation.json", json.dumps({"variants": rows}, indent=1))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=pipeline.ABLATION_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write(out / "ablation.csv", buf.getvalue())
    print(out)
    return 0


COMMANDS = {"train": cmd_train, "export": cmd_export, "bench": cmd_bench,
            "sensitivity": cmd_sensitivity, "ablate": cmd_ablate}


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
        threads = 1 if args.command == "bench" else args.threads
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, ArchiveError, OSError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
