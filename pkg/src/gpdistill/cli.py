"""Command-line entry point: ``gpdistill <subcommand> [flags]``.

Every subcommand reads one flat YAML config (``--config``); flags win over the
file. A distillation ``manifest.json`` is accepted as ``--config`` as well, in
which case the recorded cell is replayed.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import config as config_mod
from . import pipeline
from .exceptions import ConfigurationError, GPDError, IngestionError


def _load_document(path):
    if path is None:
        return {}, {}
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise IngestionError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
    if isinstance(doc, dict) and "manifest_version" in doc:
        return dict(doc["config"]), dict(doc.get("cell", {}))
    return doc or {}, {}


def _override(pairs):
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def resolve_config(args):
    doc, cell = _load_document(args.config)
    if not isinstance(doc, dict):
        raise ConfigurationError("config document must be a mapping")
    doc.update(_override(args.set))
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["out"] = args.out
    if args.deterministic is not None:
        doc["deterministic"] = args.deterministic
    return config_mod.parse_dict(doc), cell


def cmd_datagen(cfg, args, cell):
    m = pipeline.run_datagen(cfg, cfg.out, k_shot=args.k)
    return {"data": str(Path(cfg.out) / "data"), "counts": m["counts"]}


def cmd_adapt(cfg, args, cell):
    if not (Path(cfg.out) / "data" / "source_pool").is_dir():
        raise ConfigurationError(f"missing source dataset under {cfg.out}/data; run `datagen` first")
    m = pipeline.run_adapt(cfg, cfg.out, k=args.k)
    return {"teacher": str(Path(cfg.out) / "teacher"), "k": m["k"], "checkpoints": m["checkpoints"],
            "frechet_source": m["frechet_source"]}


def cmd_augment(cfg, args, cell):
    path = pipeline.run_augment(cfg, cfg.out, n=args.n)
    return {"augment": str(path)}


def cmd_distill(cfg, args, cell):
    mode = args.mode or cell.get("mode") or cfg.mode
    pairs = args.pairs or cell.get("pairs") or cfg.k_shot
    seed = args.cell_seed if args.cell_seed is not None else cell.get("seed", cfg.seed)
    if cell:
        pipeline.ensure_inputs(cfg, cfg.out, need_teacher=mode != "BL")
    row = pipeline.run_cell(cfg, cfg.out, mode, int(pairs), int(seed), resume=not args.force)
    return {"cell": pipeline.cell_name(mode, int(pairs), int(seed)), "metrics": row}


def cmd_eval(cfg, args, cell):
    rows, verdicts = pipeline.evaluate_cells(cfg, cfg.out, test_dir=args.test_dir, student_dirs=args.student)
    return {"report": str(Path(cfg.out) / "eval" / "report.csv"), "rows": len(rows), "verdicts": verdicts}


def cmd_ablate(cfg, args, cell):
    def progress(mode, pairs, seed, row):
        print(f"[cell] {mode} pairs={pairs} seed={seed} ssim={row['ssim']:.4f} perceptual={row['perceptual']:.5f}",
              file=sys.stderr, flush=True)

    rows, verdicts = pipeline.run_ablate(cfg, cfg.out, progress=progress)
    return {"summary": str(Path(cfg.out) / "ablate" / "summary.csv"), "rows": len(rows),
            "verdicts": {k: v["pass"] if isinstance(v, dict) else v for k, v in verdicts.items()}}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config or a distillation manifest.json")
    common.add_argument("--seed", type=int, help="run seed (data, teacher, default student seed)")
    common.add_argument("--out", help="run directory")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = argparse.ArgumentParser(prog="gpdistill", description="Few-shot translation by distilling an adapted GAN prior.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("datagen", parents=[common], help="write synthetic source/train/test/anchor folders")
    s.add_argument("--k", type=int, help="anchor (k-shot) count, default k_shot")
    s = sub.add_parser("adapt", parents=[common], help="pretrain the source generator and adapt the target one")
    s.add_argument("--k", type=int, help="number of target images used for adaptation")
    s = sub.add_parser("augment", parents=[common], help="export shared-latent augmented pairs")
    s.add_argument("--n", type=int, help="number of pairs, default augment_count")
    s = sub.add_parser("distill", parents=[common], help="train and evaluate one student")
    s.add_argument("--mode", choices=["BL", "Aug", "Aug+Anchor"])
    s.add_argument("--pairs", type=int, help="anchor pairs drawn from the train pool, default k_shot")
    s.add_argument("--cell-seed", type=int, help="student / stream seed, default --seed")
    s.add_argument("--force", action="store_true", help="retrain even if a finished cell exists")
    s = sub.add_parser("eval", parents=[common], help="evaluate trained students, write report and sheets")
    s.add_argument("--test-dir", help="folder with source/ and target/ subfolders, default the run's test split")
    s.add_argument("--student", action="append", help="cell directory to evaluate (repeatable), default all")
    sub.add_parser("ablate", parents=[common], help="run the BL/Aug/Aug+Anchor x data-scale x seed sweep")
    return p


COMMANDS = {
    "datagen": cmd_datagen,
    "adapt": cmd_adapt,
    "augment": cmd_augment,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg, cell = resolve_config(args)
        result = COMMANDS[args.command](cfg, args, cell)
    except GPDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
