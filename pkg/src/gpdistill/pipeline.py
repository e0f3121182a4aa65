"""Pipeline stages behind the CLI.

Layout under the run directory ``out``::

    data/{source_pool,train,test,anchors}/   PNG pair folders + manifest.json
    teacher/{source,target}/                 generator checkpoints
    teacher/manifest.json, *_log.csv
    cells/<mode>_n<pairs>_s<seed>/           student, train_log.csv, metrics.csv, manifest.json
    augment/                                 exported augmented pairs
    eval/, ablate/                           reports
    timings.json                             wall-clock seconds per stage

Manifests hold only deterministic content; wall-clock timings go to
``timings.json`` so reruns produce identical manifests.
"""
from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .augment import AugmentedPairStream, export_augmented_set
from .datagen import build_paired_dataset, load_image_folder, split, write_image_folder
from .distill import set_deterministic, train
from .exceptions import ConfigurationError, ContractError, IngestionError
from .metrics import contact_sheet, evaluate_student, extractor_stats, frechet_distance, translate, trend_report
from .metrics import write_report_csv, write_verdicts
from .nets import (
    build_feature_extractor,
    build_teacher_generator,
    parameter_fingerprint,
    read_checkpoint_header,
    save_checkpoint,
    student_from_checkpoint,
    teacher_from_checkpoint,
)
from .teacher import adapt, pretrain_source

MANIFEST_VERSION = 1
DATA_KEYS = (
    "seed", "resolution", "num_shapes", "palette_seed", "background_mode", "oracle",
    "oracle_levels", "oracle_gain", "oracle_blend", "source_pool", "train_pool", "test_size", "k_shot",
)
TEACHER_KEYS = DATA_KEYS + (
    "latent_dim", "teacher_widths", "pretrain_iterations", "pretrain_batch", "adapt_iterations",
    "adapt_batch", "consistency_weight", "adapt_tune_last", "teacher_lr",
)
METRIC_COLUMNS = ("mode", "data_scale", "seed", "n", "ssim", "ssim_median", "perceptual", "perceptual_median", "frechet")


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _subset_key(cfg, keys):
    d = cfg.to_dict()
    return {k: d[k] for k in keys}


def _recorded(cfg):
    # the run directory is not part of a run's identity
    d = cfg.to_dict()
    d.pop("out")
    return d


def _write_json(path, obj):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    except OSError as exc:
        raise IngestionError(f"cannot write {path}: {exc}") from exc


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc


def record_timing(out, stage, seconds):
    path = Path(out) / "timings.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data[stage] = round(seconds, 3)
    _write_json(path, data)


def _prepare(cfg):
    if cfg.deterministic:
        set_deterministic(True)


# -- datagen ----------------------------------------------------------------


def source_pool_seed(seed):
    return int(np.random.SeedSequence([int(seed), 1]).generate_state(1)[0])


def run_datagen(cfg, out, k_shot=None):
    """Source pool for teacher pretraining, train pool, test set and the k-shot anchor folder."""
    t0 = time.perf_counter()
    k = cfg.k_shot if k_shot is None else int(k_shot)
    if not 1 <= k <= min(20, cfg.train_pool):
        raise ConfigurationError(f"k-shot must be within 1..{min(20, cfg.train_pool)}, got {k}")
    spec, oracle = cfg.synthetic_spec(), cfg.oracle_transform()
    data = Path(out) / "data"
    source_pool = build_paired_dataset(spec, oracle, cfg.source_pool, source_pool_seed(cfg.seed), "source-pool")
    pool = build_paired_dataset(spec, oracle, cfg.train_pool + cfg.test_size, cfg.seed, oracle.kind)
    train_set, test_set = split(pool, cfg.train_pool, cfg.seed)
    anchors = train_set.subset(range(k), label="anchors")
    for name, ds in (("source_pool", source_pool), ("train", train_set), ("test", test_set), ("anchors", anchors)):
        write_image_folder(ds, data / name, prefix=name)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "stage": "datagen",
        "config": _recorded(cfg),
        "data_key": _digest(_subset_key(cfg, DATA_KEYS)),
        "k_shot": k,
        "synthetic_spec": spec.__dict__,
        "oracle": oracle.to_dict(),
        "counts": {"source_pool": len(source_pool), "train": len(train_set), "test": len(test_set), "anchors": k},
    }
    _write_json(data / "manifest.json", manifest)
    record_timing(out, "datagen", time.perf_counter() - t0)
    return manifest


def data_ready(cfg, out):
    path = Path(out) / "data" / "manifest.json"
    if not path.exists():
        return False
    m = _read_json(path)
    return m.get("data_key") == _digest(_subset_key(cfg, DATA_KEYS)) and m.get("k_shot") == cfg.k_shot


def load_split(out, name, resolution=32):
    d = Path(out) / "data" / name
    if not d.is_dir():
        raise ConfigurationError(f"missing dataset folder {d}; run the datagen stage first")
    return load_image_folder(d / "source", d / "target", resolution, label=name)


# -- teacher ----------------------------------------------------------------


@torch.no_grad()
def _sample_frechet(g, reference, extractor, n=400, seed=12345):
    z = torch.randn(n, g.spec.latent.dim, generator=torch.Generator().manual_seed(seed))
    return frechet_distance(extractor_stats(g(z).numpy(), extractor), reference)


def run_adapt(cfg, out, k=None):
    """Pretrain G_s on the source pool and adapt G_t to ``k`` anchor targets."""
    _prepare(cfg)
    t0 = time.perf_counter()
    source = load_split(out, "source_pool", cfg.resolution)
    anchors = load_split(out, "anchors", cfg.resolution)
    k = len(anchors) if k is None else int(k)
    if not 1 <= k <= len(anchors):
        raise ConfigurationError(f"k={k} but the anchor folder holds {len(anchors)} pairs")
    targets = anchors.targets[:k]
    tdir = Path(out) / "teacher"
    extractor = build_feature_extractor(cfg.extractor_spec())
    reference = extractor_stats(source.sources.astype(np.float32), extractor)

    g0 = build_teacher_generator(cfg.teacher_spec(), cfg.seed)
    fd_init = _sample_frechet(g0, reference, extractor)
    g_s, _ = pretrain_source(g0, source.sources, cfg.pretrain_config(), tdir / "pretrain_log.csv")
    fd_pre = _sample_frechet(g_s, reference, extractor)
    t1 = time.perf_counter()
    g_t, _ = adapt(g_s, targets, cfg.adapt_config(), tdir / "adapt_log.csv")
    save_checkpoint(g_s, tdir / "source", {"role": "source"})
    save_checkpoint(g_t, tdir / "target", {"role": "target", "k": k})
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "stage": "adapt",
        "config": _recorded(cfg),
        "teacher_key": _digest({**_subset_key(cfg, TEACHER_KEYS), "k": k}),
        "k": k,
        "checkpoints": {"source": parameter_fingerprint(g_s), "target": parameter_fingerprint(g_t)},
        "frechet_source": {"init": fd_init, "pretrained": fd_pre},
    }
    _write_json(tdir / "manifest.json", manifest)
    record_timing(out, "pretrain", t1 - t0)
    record_timing(out, "adapt", time.perf_counter() - t1)
    return manifest


def teacher_ready(cfg, out):
    path = Path(out) / "teacher" / "manifest.json"
    if not path.exists():
        return False
    m = _read_json(path)
    return m.get("teacher_key") == _digest({**_subset_key(cfg, TEACHER_KEYS), "k": cfg.k_shot})


def _verified(load, path, expected=None):
    header = read_checkpoint_header(path)
    net = load(path)
    actual = parameter_fingerprint(net)
    if actual != header.get("content_hash") or (expected is not None and actual != expected):
        raise ContractError(f"checkpoint {path} content does not match its recorded fingerprint")
    return net


def load_teacher(out):
    tdir = Path(out) / "teacher"
    if not (tdir / "manifest.json").exists():
        raise ConfigurationError(f"no teacher checkpoints under {tdir}; run the adapt stage first")
    fp = _read_json(tdir / "manifest.json")["checkpoints"]
    g_s = _verified(teacher_from_checkpoint, tdir / "source", fp["source"])
    g_t = _verified(teacher_from_checkpoint, tdir / "target", fp["target"])
    return g_s, g_t


def run_augment(cfg, out, n=None):
    g_s, g_t = load_teacher(out)
    stream = AugmentedPairStream(g_s, g_t, stream_seed=cfg.seed, pool_size=cfg.augment_pool or None)
    export_augmented_set(stream, cfg.augment_count if n is None else int(n), Path(out) / "augment")
    return Path(out) / "augment"


# -- distillation cells -----------------------------------------------------


def pairs_for_scale(cfg, scale):
    return max(1, int(scale * cfg.train_pool))


def cell_name(mode, pairs, seed):
    # Aug never touches anchors, so its cell is shared across data scales
    return f"Aug_s{seed}" if mode == "Aug" else f"{mode.replace('+', '_')}_n{pairs}_s{seed}"


def _cell_key(cfg, mode, pairs, seed, teacher_fp):
    d = cfg.to_dict()
    skip = {"out", "mode", "seeds", "scales", "modes", "scale_modes", "min_gap", "augment_count", "seed"}
    return _digest({
        "config": {k: v for k, v in d.items() if k not in skip},
        "data_seed": cfg.seed,
        "mode": mode,
        "pairs": None if mode == "Aug" else pairs,
        "seed": seed,
        "teacher": teacher_fp,
    })


def _disjoint_guard(test, anchors):
    if anchors is None:
        return
    seen = {hashlib.sha256(np.ascontiguousarray(x, dtype=np.float32).tobytes()).hexdigest() for x in anchors.sources}
    clash = [i for i, x in enumerate(test.sources)
             if hashlib.sha256(np.ascontiguousarray(x, dtype=np.float32).tobytes()).hexdigest() in seen]
    if clash:
        raise ContractError(f"{len(clash)} evaluation images also appear in the anchor set (first index {clash[0]})")


def run_cell(cfg, out, mode, pairs, seed, train_set=None, test_set=None, teacher=None, extractor=None,
             resume=True):
    """Train and evaluate one student. Returns the metrics row."""
    _prepare(cfg)
    out = Path(out)
    name = cell_name(mode, pairs, seed)
    cdir = out / "cells" / name
    teacher_fp = None
    if mode != "BL":
        if teacher is None:
            teacher = load_teacher(out)
        teacher_fp = [parameter_fingerprint(g) for g in teacher]
    key = _cell_key(cfg, mode, pairs, seed, teacher_fp)
    done = cdir / "manifest.json"
    if resume and done.exists():
        m = _read_json(done)
        if m.get("cell_key") == key and (cdir / "metrics.csv").exists():
            return m["metrics"]

    t0 = time.perf_counter()
    train_set = train_set if train_set is not None else load_split(out, "train", cfg.resolution)
    test_set = test_set if test_set is not None else load_split(out, "test", cfg.resolution)
    if pairs > len(train_set):
        raise ConfigurationError(f"{pairs} anchor pairs requested but the train pool holds {len(train_set)}")
    anchors = None if mode == "Aug" else train_set.subset(range(pairs), label="anchors")
    _disjoint_guard(test_set, anchors)
    extractor = extractor if extractor is not None else build_feature_extractor(cfg.extractor_spec())

    dcfg = cfg.distill_config(mode, seed, cdir)
    state = train(dcfg, anchors.pairs if anchors is not None else None, teacher, extractor)
    save_checkpoint(state.student, cdir / "student", {"mode": mode, "pairs": pairs, "seed": seed})
    row = {"mode": mode, "data_scale": pairs if mode != "Aug" else 0, "seed": seed}
    row.update(evaluate_student(state.student, test_set, extractor))
    write_report_csv([row], cdir / "metrics.csv")
    outputs = translate(state.student, test_set.sources[:8])
    contact_sheet([test_set.sources[:8], outputs, test_set.targets[:8]], cdir / "contact_sheet.png")
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "stage": "distill",
        "config": _recorded(cfg),
        "cell": {"mode": mode, "pairs": pairs, "seed": seed},
        "cell_key": key,
        "checkpoints": {
            "student": parameter_fingerprint(state.student),
            "teacher": teacher_fp,
        },
        "updates": {"steps": state.steps, "d_updates": state.d_updates, "g_updates": state.g_updates},
        "metrics": row,
        "history": "train_log.csv",
    }
    _write_json(done, manifest)
    record_timing(out, f"cell:{name}", time.perf_counter() - t0)
    return row


def rerun_from_manifest(manifest_path, out):
    """Re-execute a cell recorded in ``manifest_path`` into a fresh run directory ``out``.

    The data and teacher stages are regenerated from the recorded config, so the
    result depends on nothing but the manifest.
    """
    m = _read_json(manifest_path)
    if m.get("stage") != "distill":
        raise ConfigurationError(f"{manifest_path} is not a distillation manifest")
    cfg = config_mod.parse_dict(m["config"])
    ensure_inputs(cfg, out, need_teacher=m["cell"]["mode"] != "BL")
    c = m["cell"]
    return run_cell(cfg, out, c["mode"], c["pairs"], c["seed"], resume=False)


def ensure_inputs(cfg, out, need_teacher=True):
    if not data_ready(cfg, out):
        run_datagen(cfg, out)
    if need_teacher and not teacher_ready(cfg, out):
        run_adapt(cfg, out)


# -- evaluation and sweep ---------------------------------------------------


def evaluate_cells(cfg, out, test_dir=None, student_dirs=None):
    """Re-evaluate finished students, optionally on another test folder."""
    out = Path(out)
    if test_dir is not None:
        test_set = load_image_folder(Path(test_dir) / "source", Path(test_dir) / "target", cfg.resolution)
    else:
        test_set = load_split(out, "test", cfg.resolution)
    train_set = load_split(out, "train", cfg.resolution)
    cells = student_dirs or sorted(p.parent for p in (out / "cells").glob("*/manifest.json"))
    if not cells:
        raise ConfigurationError(f"no trained students under {out / 'cells'}")
    extractor = build_feature_extractor(cfg.extractor_spec())
    rows = []
    edir = out / "eval"
    for cdir in map(Path, cells):
        m = _read_json(cdir / "manifest.json")
        c = m["cell"]
        if c["mode"] != "Aug":
            _disjoint_guard(test_set, train_set.subset(range(c["pairs"])))
        student = _verified(student_from_checkpoint, cdir / "student", m["checkpoints"]["student"])
        row = {"mode": c["mode"], "data_scale": c["pairs"] if c["mode"] != "Aug" else 0, "seed": c["seed"]}
        row.update(evaluate_student(student, test_set, extractor))
        rows.append(row)
        contact_sheet(
            [test_set.sources[:8], translate(student, test_set.sources[:8]), test_set.targets[:8]],
            edir / "sheets" / f"{cdir.name}.png",
        )
    write_report_csv(rows, edir / "report.csv")
    try:
        verdicts = trend_report(_expand_aug(rows, sorted({r["data_scale"] for r in rows} - {0})),
                                ablation_scale=cfg.k_shot, min_gap=cfg.min_gap)
    except ConfigurationError as exc:
        verdicts = {"skipped": str(exc)}
    write_verdicts(verdicts, edir / "verdicts.json")
    return rows, verdicts


def _expand_aug(rows, scales):
    """Aug rows do not depend on the data scale; repeat them at every scale."""
    out = [r for r in rows if r["mode"] != "Aug"]
    for r in rows:
        if r["mode"] == "Aug":
            out += [{**r, "data_scale": s} for s in scales]
    return out


def sweep_cells(cfg):
    """(mode, pairs, seed) for the k-shot ablation and the data-scale sweep, deduplicated."""
    cells = []
    for seed in cfg.seeds:
        for mode in cfg.modes:
            cells.append((mode, cfg.k_shot, seed))
        for scale in cfg.scales:
            for mode in cfg.scale_modes:
                cells.append((mode, pairs_for_scale(cfg, scale), seed))
    seen, unique = set(), []
    for mode, pairs, seed in cells:
        key = cell_name(mode, pairs, seed)
        if key not in seen:
            seen.add(key)
            unique.append((mode, pairs, seed))
    return unique


def run_ablate(cfg, out, progress=None):
    """Full sweep; finished cells are skipped. Writes ablate/summary.csv and verdicts.json."""
    out = Path(out)
    ensure_inputs(cfg, out, need_teacher=any(m != "BL" for m in cfg.modes + cfg.scale_modes))
    train_set = load_split(out, "train", cfg.resolution)
    test_set = load_split(out, "test", cfg.resolution)
    teacher = load_teacher(out) if (out / "teacher" / "manifest.json").exists() else None
    extractor = build_feature_extractor(cfg.extractor_spec())
    results = {}
    for mode, pairs, seed in sweep_cells(cfg):
        row = run_cell(cfg, out, mode, pairs, seed, train_set, test_set, teacher, extractor)
        results[cell_name(mode, pairs, seed)] = row
        if progress:
            progress(mode, pairs, seed, row)
    rows, seen = [], set()
    for seed in cfg.seeds:
        grid = [(m, cfg.k_shot) for m in cfg.modes]
        grid += [(m, pairs_for_scale(cfg, s)) for s in cfg.scales for m in cfg.scale_modes]
        for mode, pairs in grid:
            if (mode, pairs, seed) not in seen:
                seen.add((mode, pairs, seed))
                rows.append({**results[cell_name(mode, pairs, seed)], "data_scale": pairs})
    rows = [{k: r[k] for k in METRIC_COLUMNS} for r in rows]
    adir = out / "ablate"
    write_report_csv(rows, adir / "summary.csv")
    full_grid = {"BL", "Aug", "Aug+Anchor"} <= set(cfg.modes)
    try:
        verdicts = trend_report(rows, ablation_scale=cfg.k_shot if full_grid else None, min_gap=cfg.min_gap)
    except ConfigurationError as exc:
        verdicts = {"skipped": str(exc)}
    write_verdicts(verdicts, adir / "verdicts.json")
    return rows, verdicts
