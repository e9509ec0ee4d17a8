"""Command-line entry point: ``trgkd <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
(including failed gradient checks), 3 I/O or parse error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, parse_value, save_config
from .data import LabeledDataset, save_dataset
from .errors import ConfigError, DataParseError, NumericError, TRGError, UsageError
from .experiment import ABLATION_PRESET, cached_teacher, make_student, prepare_data, run_distill, train_teacher
from .gradcheck import LOSSES, TOLERANCE, run_suite
from .models import build_net
from .train import (
    MetricsWriter,
    distill,
    evaluate,
    export_embeddings,
    load_checkpoint,
    load_state,
    load_teacher,
    save_teacher,
)

log = logging.getLogger("trgkd")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag -> config field, for the shared overrides
_FLAGS = {
    "seed": int, "epochs": int, "batch_size": int, "k": int, "sigma": str,
    "alpha": float, "beta": float, "gamma": float, "tau": float, "tau_g": float,
    "warmup_frac": float, "imbalance_rate": float,
}


def _common(p: argparse.ArgumentParser, outputs: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    for name, typ in _FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--ablate", metavar="LIST", default=None,
                   help="comma-separated loss terms to remove (kd, inner, local, global)")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="override any config key; repeatable")
    if outputs:
        p.add_argument("--output-dir", metavar="PATH", default=None)
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trgkd", description="Token-graph knowledge distillation at desk scale.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("pretrain", help="train and freeze a teacher")
    _common(p)

    p = sub.add_parser("distill", help="distill a student from a frozen teacher")
    _common(p)
    p.add_argument("--teacher", metavar="PATH", help="teacher checkpoint (pretrained in-process if omitted)")
    p.add_argument("--resume", action="store_true", help="continue from OUTPUT_DIR/last.ckpt")

    p = sub.add_parser("eval", help="accuracy of a teacher or student checkpoint")
    _common(p, outputs=False)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=TOLERANCE)
    p.add_argument("--corrupt", choices=LOSSES, default=None, help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("sweep", help="run a grid of distillation cells")
    _common(p)
    p.add_argument("--preset", choices=("ablation", "batch"), default=None,
                   help="ablation: the six loss configurations; batch: batch sizes 8,16,32,64")
    p.add_argument("--grid", metavar="KEY=V1,V2", action="append", default=[],
                   help="grid axis over a config key; repeatable")
    p.add_argument("--seeds", type=int, default=1, help="seeds 0..N-1 per cell")

    p = sub.add_parser("export-embeddings", help="write label + pooled penultimate features as CSV")
    _common(p, outputs=False)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", metavar="PATH", required=True)

    p = sub.add_parser("make-dataset", help="write the configured dataset to a file")
    _common(p, outputs=False)
    p.add_argument("--out", metavar="PATH", required=True)
    p.add_argument("--format", choices=("csv", "bin"), default=None)
    p.add_argument("--split", choices=("all", "train", "test"), default="all")
    return parser


# -- config plumbing ------------------------------------------------------


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    updates = {}
    for name in _FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if getattr(args, "ablate", None) is not None:
        updates["ablate"] = parse_value("ablate", args.ablate)
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        updates[key.strip()] = parse_value(key.strip(), raw)
    if getattr(args, "output_dir", None):
        updates["output_dir"] = args.output_dir
    if getattr(args, "force", False):
        updates["force"] = True
    cfg = replace(cfg, **updates).resolved()
    cfg.validate()
    return cfg


def prepare_output(cfg: RunConfig, command: str, allow_existing: bool = False) -> Path:
    out = Path(cfg.output_dir or f"runs/{command}-{cfg.hash()[:10]}")
    if out.exists() and any(out.iterdir()) and not (cfg.force or allow_existing):
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    save_config(replace(cfg, output_dir=str(out)), out / "config.txt")
    return out


# -- subcommands ------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    out = prepare_output(cfg, "pretrain")
    train, test = prepare_data(cfg)
    teacher, recs = train_teacher(cfg, train)
    writer = MetricsWriter(out)
    for r in recs:
        writer.write(r)
    writer.close()
    acc_test = evaluate(teacher, test)
    save_teacher(out / "teacher.ckpt", teacher, cfg.teacher_hash(), recs[-1].accuracy)
    print(json.dumps({"teacher": str(out / "teacher.ckpt"), "train_accuracy": recs[-1].accuracy,
                      "test_accuracy": acc_test}))
    return EXIT_OK


def _load_matching_teacher(path, cfg: RunConfig):
    teacher, meta, h = load_teacher(path)
    if h != cfg.teacher_hash():
        raise UsageError(
            f"teacher checkpoint {path} was trained under a different configuration "
            "(data, teacher architecture or teacher schedule differ)"
        )
    return teacher


def cmd_distill(args) -> int:
    cfg = resolve_config(args)
    out = prepare_output(cfg, "distill", allow_existing=args.resume)
    train, test = prepare_data(cfg)
    if args.teacher:
        teacher = _load_matching_teacher(args.teacher, cfg)
    else:
        teacher, recs = train_teacher(cfg, train)
        save_teacher(out / "teacher.ckpt", teacher, cfg.teacher_hash(), recs[-1].accuracy)
    student, proj = make_student(cfg, teacher)
    state = None
    if args.resume and (out / "last.ckpt").exists():
        state = load_state(out / "last.ckpt")
    state, records = distill(teacher, student, proj, train, test, cfg, out_dir=out, state=state)
    tests = [r for r in records if r.split == "test"]
    print(json.dumps({"output_dir": str(out), "epoch": state.epoch,
                      "final_accuracy": tests[-1].accuracy if tests else None,
                      "best_accuracy": state.best_accuracy}))
    return EXIT_OK


def _net_from_checkpoint(path, cfg: RunConfig):
    blobs, meta, h = load_checkpoint(path)
    if meta.get("kind") == "teacher":
        return load_teacher(path)[0]
    if meta.get("kind") != "distill":
        raise DataParseError(f"{path}: unknown checkpoint kind {meta.get('kind')!r}")
    if h != cfg.hash():
        raise UsageError(f"student checkpoint {path} does not match the given configuration")
    student = build_net(cfg.student_spec())
    student.load_arrays({k[len("student/"):]: v for k, v in blobs.items() if k.startswith("student/")})
    return student.freeze()


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    net = _net_from_checkpoint(args.checkpoint, cfg)
    train, test = prepare_data(cfg)
    ds = test if args.split == "test" else train
    print(json.dumps({"checkpoint": args.checkpoint, "split": args.split, "accuracy": evaluate(net, ds)}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_suite(seeds=args.seeds, corrupt=args.corrupt)
    failures = 0
    for name, err in report.items():
        ok = err <= args.tolerance
        failures += not ok
        print(f"{name:8s} max_rel_error={err:.3e} {'ok' if ok else 'FAIL'}")
    print(f"{failures} of {len(report)} checks failed (tolerance {args.tolerance:g})")
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


def _grid_cells(args, base: RunConfig) -> list[tuple[str, dict]]:
    axes: list[list[tuple[str, dict]]] = []
    if args.preset == "ablation":
        axes.append([(name, dict(o)) for name, o in ABLATION_PRESET.items()])
    elif args.preset == "batch":
        axes.append([(f"batch_size={b}", {"batch_size": b}) for b in (8, 16, 32, 64)])
    for item in args.grid:
        if "=" not in item:
            raise UsageError(f"--grid expects KEY=V1,V2,..., got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        values = [v for v in raw.split(",") if v.strip()] if key != "ablate" else raw.split(";")
        if not values:
            raise UsageError(f"--grid {key}: no values")
        axes.append([(f"{key}={v.strip()}", {key: parse_value(key, v)}) for v in values])
    if not axes:
        raise UsageError("empty sweep grid: pass --preset and/or --grid")
    cells = []
    for combo in itertools.product(*axes):
        name = "/".join(n for n, _ in combo)
        merged: dict = {}
        for _, o in combo:
            merged.update(o)
        cells.append((name, merged))
    return cells


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    cells = _grid_cells(args, cfg)
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    out = prepare_output(cfg, "sweep")
    fields = ["cell", "seed", "status", "final_accuracy", "best_accuracy", "mean_kld", "mul",
              "first_loss", "final_loss"]
    data_cache: dict = {}
    rows = 0
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for name, overrides in cells:
            for seed in range(args.seeds):
                row = {"cell": name, "seed": seed}
                try:
                    cell_cfg = replace(cfg, seed=seed, **overrides).resolved()
                    cell_cfg.validate()
                    key = cell_cfg.teacher_hash()
                    if key not in data_cache:
                        train, test = prepare_data(cell_cfg)
                        data_cache[key] = (train, test, cached_teacher(cell_cfg, train, out / "teachers"))
                    train, test, teacher = data_cache[key]
                    res = run_distill(cell_cfg, teacher, train, test, name)
                    row.update(status="ok", final_accuracy=res.final_accuracy, best_accuracy=res.best_accuracy,
                               mean_kld=res.mean_kld, mul=res.mul, first_loss=res.first_loss,
                               final_loss=res.final_loss)
                except TRGError as exc:
                    log.warning("cell %s seed %d failed: %s", name, seed, exc)
                    row["status"] = f"error: {exc}"
                w.writerow(row)
                fh.flush()
                rows += 1
                print(json.dumps(row), flush=True)
    print(json.dumps({"summary": str(out / "sweep.csv"), "rows": rows}))
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = resolve_config(args)
    net = _net_from_checkpoint(args.checkpoint, cfg)
    train, test = prepare_data(cfg)
    n = export_embeddings(net, test if args.split == "test" else train, args.out)
    print(json.dumps({"out": args.out, "rows": n}))
    return EXIT_OK


def cmd_make_dataset(args) -> int:
    cfg = resolve_config(args)
    train, test = prepare_data(cfg)
    if args.split == "all":
        ds = LabeledDataset(np.concatenate([train.images, test.images]),
                            np.concatenate([train.labels, test.labels]), cfg.num_classes, "all")
    else:
        ds = train if args.split == "train" else test
    save_dataset(ds, args.out, args.format)
    print(json.dumps({"out": args.out, "images": len(ds)}))
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain, "distill": cmd_distill, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep, "export-embeddings": cmd_export, "make-dataset": cmd_make_dataset,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("choose a subcommand: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataParseError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TRGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
