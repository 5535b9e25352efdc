"""Command line entry point: ``ktl generate|train|eval|ablate|infer``.

Every command works inside a run directory (``--run-dir`` or ``$KTL_RUN_DIR``)
and writes the fully resolved configuration to ``config.json`` there before
doing any work.  Exit codes: 0 success, 1 user/config error, 2 internal error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import synth
from .keypoints import Keypoint, KeypointSet, read_keypoint_file, write_keypoint_file
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .training import TrainConfig

log = logging.getLogger("ktl")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    """Bad input or configuration; reported without a traceback (exit 1)."""


# ------------------------------------------------------------------ config

@dataclass
class SynthConfig:
    n_images: int = 1000
    template_pool: int = 3
    image_size: int = 64
    deform_strength: float = 0.5
    max_rotation: float = float(np.pi / 6)
    flip_prob: float = 0.0
    kind: str = "affine"
    distractor_fraction: float = 0.2
    shape_jitter: float = 0.006
    test_fraction: float = 0.2


@dataclass
class KeypointConfig:
    n_points: int = 15
    real_ratio: float = 1.0
    jitter_px: float = 0.0


@dataclass
class EvalConfig:
    normalizer: str = "interocular"
    test_flip: bool = False


SECTIONS = {"synth": SynthConfig, "keypoints": KeypointConfig, "train": TrainConfig, "eval": EvalConfig}
PRESETS = {
    "default": {},
    "desk": {"train": dict(warmup_iters=300, batch_size=8, hidden=16, recluster_every=150, total_rounds=10,
                           learning_rate=1e-3, stage2_iters=600, K=10, M=30, nms_threshold=0.1)},
}


def default_config() -> dict:
    out = {name: asdict(cls()) for name, cls in SECTIONS.items()}
    out["seed"] = 0
    return out


def _coerce(cls, key, raw):
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise UserError(f"unknown config field {cls.__name__}.{key}")
    t = str(types[key])
    if isinstance(raw, str):
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
    else:
        val = raw
    if "float" in t and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if "bool" in t and not isinstance(val, bool):
        raise UserError(f"{cls.__name__}.{key} expects true/false, got {raw!r}")
    return val


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key == "seed":
            out["seed"] = int(val)
            continue
        if key not in SECTIONS:
            raise UserError(f"unknown config section {key!r}")
        if not isinstance(val, dict):
            raise UserError(f"config section {key!r} must be an object")
        for k, v in val.items():
            out[key][k] = _coerce(SECTIONS[key], k, v)
    return out


def validate(cfg: dict) -> dict:
    """Build the section dataclasses, naming any invalid field."""
    try:
        TrainConfig.from_dict(cfg["train"])
        SynthConfig(**cfg["synth"])
        KeypointConfig(**cfg["keypoints"])
        EvalConfig(**cfg["eval"])
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid config: {exc}") from None
    s = cfg["synth"]
    if not 0 < s["test_fraction"] < 1:
        raise UserError("invalid config: synth.test_fraction must lie in (0, 1)")
    if cfg["eval"]["normalizer"] not in ("interocular", "bbox_sqrt_area"):
        raise UserError("invalid config: eval.normalizer must be interocular or bbox_sqrt_area")
    return cfg


def resolve(args, base: dict | None = None) -> dict:
    """Defaults, then ``base`` (a stored run config) or a preset, then file and flag overrides."""
    cfg = default_config()
    preset = getattr(args, "preset", None)
    if base is not None:
        cfg = merge(cfg, base)
    if base is None or preset:
        cfg = merge(cfg, PRESETS[preset or "default"])
    if getattr(args, "config", None):
        try:
            cfg = merge(cfg, json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UserError(f"cannot read config {args.config}: {exc}") from None
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise UserError(f"--set expects section.field=value, got {item!r}")
        cfg = merge(cfg, {section: {name: value}})
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = int(args.seed)
    cfg["train"]["seed"] = cfg["seed"]
    if getattr(args, "rounds", None) is not None:
        cfg["train"]["total_rounds"] = int(args.rounds)
    return validate(cfg)


def write_config(run_dir: Path, cfg: dict, name: str = "config.json") -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / name).write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def stored_config(run_dir: Path, *names) -> dict | None:
    """The first of ``names`` present in ``run_dir``, parsed."""
    for name in names or ("config.json", "generate_config.json"):
        p = run_dir / name
        if p.exists():
            try:
                return json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise UserError(f"corrupt {p}: {exc}") from None
    return None


def _run_dir(args) -> Path:
    rd = args.run_dir or os.environ.get("KTL_RUN_DIR")
    if not rd:
        raise UserError("no run directory: pass --run-dir or set KTL_RUN_DIR")
    return Path(rd)


# ------------------------------------------------------------------ corpus

def _load_corpus(run_dir: Path):
    cdir = run_dir / "corpus"
    if not (cdir / "corpus.json").exists():
        raise UserError(f"no corpus in {cdir}; run `ktl generate` first")
    return synth.load_corpus(cdir)


def split(corpus, test_fraction: float):
    n_test = max(1, int(np.ceil(test_fraction * len(corpus))))
    if n_test >= len(corpus):
        raise UserError("corpus too small for a train/test split")
    return corpus[:-n_test], corpus[-n_test:]


def cmd_generate(args) -> int:
    run_dir = _run_dir(args)
    cfg = resolve(args)
    cdir = run_dir / "corpus"
    if cdir.exists() and not args.force:
        raise UserError(f"{cdir} exists; pass --force to regenerate")
    s = {k: v for k, v in cfg["synth"].items() if k != "test_fraction"}
    try:
        corpus = synth.generate_corpus(seed=cfg["seed"], **s)
    except ValueError as exc:
        raise UserError(f"invalid synth config: {exc}") from None
    try:
        write_config(run_dir, cfg, "generate_config.json")
        if cdir.exists():
            shutil.rmtree(cdir)
        synth.save_corpus(corpus, cdir, generator={"seed": cfg["seed"], **s})
    except OSError as exc:
        raise UserError(f"cannot write corpus: {exc}") from None
    digest = synth.manifest_hash(corpus)
    print(f"generated {len(corpus)} images ({s['template_pool']} templates, "
          f"{s['image_size']}x{s['image_size']}) in {cdir}; manifest {digest}")
    return EXIT_OK


# ------------------------------------------------------------------- train

_TRAIN_ARTIFACTS = ("checkpoints", "labels", "metrics.csv", "timing.csv", "keypoints.jsonl", "report.json",
                    "ced.svg", "per_landmark.csv", "stage2_labels.jsonl")


def _initial_keypoints(run_dir: Path, train, cfg):
    from .experiments import mixture_keypoints

    path = run_dir / "keypoints.jsonl"
    if path.exists():
        sets = read_keypoint_file(path)
        by_id = {s.sample_id: s for s in sets}
        missing = [s.sample_id for s in train if s.sample_id not in by_id]
        if missing:
            raise UserError(f"{path} lacks keypoints for {len(missing)} training images")
        return [by_id[s.sample_id] for s in train]
    k = cfg["keypoints"]
    try:
        sets = mixture_keypoints(train, k["n_points"], k["real_ratio"], k["jitter_px"], cfg["seed"])
    except ValueError as exc:
        raise UserError(f"invalid keypoint config: {exc}") from None
    write_keypoint_file(path, sets)
    return sets


def _stage2_path(run_dir: Path) -> Path:
    return run_dir / "checkpoints" / "stage2.ktl"


def save_stage2(run_dir: Path, model) -> None:
    from .correspondence import write_labels

    extra = {"symmetry": [int(p) for p in model.symmetry],
             "symmetry_counts": [int(c) for c in model.symmetry_counts],
             "centroids": np.asarray(model.centroids, dtype=float).tolist()}
    write_labels(run_dir / "stage2_labels.jsonl", model.labels)
    save_checkpoint(_stage2_path(run_dir), model.net, None, -1, extra)


def load_stage2(run_dir: Path):
    from .training import Stage2Model

    path = _stage2_path(run_dir)
    if not path.exists():
        raise UserError(f"no Stage-2 checkpoint at {path}; train with --stage 2 or all")
    net, _, _, extra = load_checkpoint(path)
    return Stage2Model(net, np.array(extra["symmetry"]), np.array(extra["symmetry_counts"]),
                       np.array(extra["centroids"]), None)


def cmd_train(args) -> int:
    from . import training

    run_dir = _run_dir(args)
    corpus = _load_corpus(run_dir)
    if args.resume or args.stage == "2":
        stored = stored_config(run_dir, "config.json")
        cfg = resolve(args, stored)
        if stored is not None:
            a, b = copy.deepcopy(stored), copy.deepcopy(cfg)
            a["train"].pop("total_rounds"), b["train"].pop("total_rounds")
            if a != b:
                raise UserError("resume config differs from the stored run config")
    else:
        cfg = resolve(args, stored_config(run_dir, "generate_config.json"))
        existing = [n for n in _TRAIN_ARTIFACTS if (run_dir / n).exists()]
        if existing and not args.force:
            raise UserError(f"{run_dir} already holds training output ({', '.join(existing)}); "
                            "pass --resume to continue or --force to restart")
        for n in existing:
            p = run_dir / n
            shutil.rmtree(p) if p.is_dir() else p.unlink()
    write_config(run_dir, cfg)
    tc = TrainConfig.from_dict(cfg["train"])
    train, test = split(corpus, cfg["synth"]["test_fraction"])

    state = None
    if args.stage in ("1", "all"):
        kps = _initial_keypoints(run_dir, train, cfg)
        state = training.run_stage1(train, kps, tc, run_dir=run_dir, resume=args.resume)
        print(f"stage 1: {state.round} rounds, {state.labels.points_per_image():.2f} points per image")
    if args.stage in ("2", "all"):
        if state is None:
            if training.latest_round(run_dir) is None:
                raise UserError("Stage 2 needs a Stage-1 checkpoint; run --stage 1 first")
            state = training.resume_state(run_dir, tc, [])
        model = training.run_stage2(state, train, tc)
        save_stage2(run_dir, model)
        print(f"stage 2: {tc.K} channels, {model.skipped_images} images without landmarks skipped")
    stage = 1 if args.stage == "1" else 2
    _write_eval(run_dir, cfg, stage, train, test, state=state)
    return EXIT_OK


# -------------------------------------------------------------------- eval

def _per_landmark_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["landmark", "forward_error", "accuracy"])
    for k, (e, a) in enumerate(zip(report.per_landmark_error, report.per_landmark_accuracy)):
        w.writerow([k, repr(float(e)), repr(float(a))])
    return buf.getvalue()


def _write_eval(out_dir: Path, cfg, stage, train, test, state=None, oracle=False) -> object:
    from . import pipeline, training
    from .plotting import plot_ced

    tc = TrainConfig.from_dict(cfg["train"])
    norm = cfg["eval"]["normalizer"]
    if oracle:
        gtr, gte = pipeline.gt_matrix(train), pipeline.gt_matrix(test)
        report = pipeline.evaluate_landmarks(gtr, gtr, gte, gte, norm)
        report.extra["stage"] = "oracle"
    elif stage == 1:
        if state is None:
            if training.latest_round(out_dir) is None:
                raise UserError(f"no Stage-1 checkpoint in {out_dir / 'checkpoints'}")
            state = training.resume_state(out_dir, tc, [])
        report = pipeline.evaluate_stage1(state, train, test, tc, norm)
        report.extra["points_per_image"] = state.labels.points_per_image()
    else:
        model = load_stage2(out_dir)
        report = pipeline.evaluate_stage2(model, train, test, cfg["eval"]["test_flip"], norm)
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    (out_dir / "ced.svg").write_text(plot_ced(report))
    (out_dir / "per_landmark.csv").write_text(_per_landmark_csv(report))
    print(f"stage {report.extra['stage']}: forward NME {report.forward_nme:.3f}  "
          f"backward NME {report.backward_nme:.3f}")
    return report


def cmd_eval(args) -> int:
    run_dir = _run_dir(args)
    corpus = _load_corpus(run_dir)
    cfg = resolve(args, stored_config(run_dir))
    if args.test_flip:
        cfg["eval"]["test_flip"] = True
    cfg = validate(cfg)
    train, test = split(corpus, cfg["synth"]["test_fraction"])
    _write_eval(run_dir, cfg, int(args.stage), train, test, oracle=args.oracle)
    return EXIT_OK


# ------------------------------------------------------------------ ablate

SWEEPS = {
    "noise": ("keypoints", "real_ratio", [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]),
    "clusters": ("train", "M", None),
    "strategy": ("train", "strategy", ["same_image/clustering", "same_image/equivariance",
                                       "different_cluster/clustering", "different_cluster/equivariance"]),
}


def _cell_configs(cfg, sweep, values):
    section, key, default = SWEEPS[sweep]
    if values is None:
        values = default
        if values is None:
            K = cfg["train"]["K"]
            values = [K, 2 * K, 3 * K]
    cells = []
    for v in values:
        c = copy.deepcopy(cfg)
        if sweep == "strategy":
            neg, corr = str(v).split("/")
            c["train"]["negative_strategy"], c["train"]["correspondence"] = neg, corr
            name = f"{neg}-{corr}"
        else:
            v = _coerce(SECTIONS[section], key, v)
            c[section][key] = v
            name = f"{key}={v}"
        cells.append((name, v, validate(c)))
    return cells


def _run_cell(corpus_dir: str, cell_dir: str, cfg: dict) -> dict:
    """One sweep cell in its own directory; returns the summary row."""
    import torch

    from . import pipeline, training
    from .experiments import mixture_keypoints

    torch.set_num_threads(1)
    cell = Path(cell_dir)
    write_config(cell, cfg)
    corpus = synth.load_corpus(corpus_dir)
    train, test = split(corpus, cfg["synth"]["test_fraction"])
    k = cfg["keypoints"]
    kps = mixture_keypoints(train, k["n_points"], k["real_ratio"], k["jitter_px"], cfg["seed"])
    tc = TrainConfig.from_dict(cfg["train"])
    state = training.run_stage1(train, kps, tc, run_dir=cell)
    rep = pipeline.evaluate_stage1(state, train, test, tc, cfg["eval"]["normalizer"])
    (cell / "report.json").write_text(rep.to_json() + "\n")
    return {"forward_nme": rep.forward_nme, "backward_nme": rep.backward_nme,
            "points_per_image": state.labels.points_per_image()}


def cmd_ablate(args) -> int:
    from .plotting import plot_lines

    run_dir = _run_dir(args)
    _load_corpus(run_dir)
    cfg = resolve(args, stored_config(run_dir))
    out = Path(args.out) if args.out else run_dir / f"ablate_{args.sweep}"
    if out.resolve() == run_dir.resolve():
        raise UserError("ablation output must not be the run directory itself")
    cells = _cell_configs(cfg, args.sweep, args.values)
    names = [n for n, _, _ in cells]
    if len(set(names)) != len(names):
        raise UserError("sweep values give overlapping cell directories")
    if out.exists():
        if not args.force:
            raise UserError(f"{out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    write_config(out, cfg)
    dirs = [str(out / "cells" / n) for n in names]
    corpus_dir = str(run_dir / "corpus")
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            rows = list(ex.map(_run_cell, [corpus_dir] * len(cells), dirs, [c for _, _, c in cells]))
    else:
        rows = [_run_cell(corpus_dir, d, c) for d, (_, _, c) in zip(dirs, cells)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "value", "forward_nme", "backward_nme", "points_per_image"])
    for (name, value, _), row in zip(cells, rows):
        w.writerow([name, value, repr(row["forward_nme"]), repr(row["backward_nme"]),
                    repr(row["points_per_image"])])
    (out / f"{args.sweep}.csv").write_text(buf.getvalue())
    xs = [float(v) if not isinstance(v, str) else float(i) for i, (_, v, _) in enumerate(cells)]
    svg = plot_lines({"forward": list(zip(xs, [r["forward_nme"] for r in rows])),
                      "backward": list(zip(xs, [r["backward_nme"] for r in rows]))},
                     SWEEPS[args.sweep][1], "NME (%)", f"{args.sweep} sweep")
    (out / f"{args.sweep}.svg").write_text(svg)
    print(f"{args.sweep} sweep: {len(rows)} cells -> {out / (args.sweep + '.csv')}")
    return EXIT_OK


# ------------------------------------------------------------------- infer

def cmd_infer(args) -> int:
    from .training import infer

    run_dir = _run_dir(args)
    model = load_stage2(run_dir)
    grid = (model.net.dims.out_h, model.net.dims.out_w)
    inputs = [Path(p) for p in args.inputs]
    items = []
    for p in inputs:
        if p.is_dir():
            items += [(s.sample_id, s.raster) for s in synth.load_corpus(p)]
        elif p.exists():
            items.append((len(items), synth.read_raster(p)))
        else:
            raise UserError(f"no such input {p}")
    want = (model.net.dims.in_h, model.net.dims.in_w)
    sets = []
    for sid, raster in items:
        if raster.shape != want:
            raise UserError(f"image {sid} has shape {raster.shape}, model expects {want}")
        pts = infer(model, raster, test_flip=args.test_flip)
        sets.append(KeypointSet(sid, [Keypoint(float(x), float(y), float(c), None, k)
                                      for k, (x, y, c) in enumerate(pts)], "stage2"))
    out = Path(args.out) if args.out else run_dir / "inference.jsonl"
    write_keypoint_file(out, sets)
    print(f"{len(sets)} images, {len(sets[0].points) if sets else 0} landmarks each (grid {grid}) -> {out}")
    return EXIT_OK


# -------------------------------------------------------------------- main

def _common(p, config=True):
    p.add_argument("--run-dir", help="run directory (default: $KTL_RUN_DIR)")
    if config:
        p.add_argument("--config", help="JSON config file (sections synth/keypoints/train/eval, seed)")
        p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE", help="override one field")
        p.add_argument("--seed", type=int)
        p.add_argument("--preset", choices=sorted(PRESETS))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ktl", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render the synthetic corpus")
    _common(g)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="Stage-1 self-training and/or Stage-2 detector")
    _common(t)
    t.add_argument("--stage", choices=["1", "2", "all"], default="all")
    t.add_argument("--rounds", type=int)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="forward/backward NME report")
    _common(e)
    e.add_argument("--stage", choices=["1", "2"], default="2")
    e.add_argument("--oracle", action="store_true", help="evaluate ground truth against itself")
    e.add_argument("--test-flip", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweeps over noise ratio, cluster count or pairing strategy")
    _common(a)
    a.add_argument("--sweep", choices=sorted(SWEEPS), required=True)
    a.add_argument("--values", nargs="+")
    a.add_argument("--out")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--force", action="store_true")
    a.add_argument("--rounds", type=int)
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("infer", help="K landmarks per image with the Stage-2 model")
    _common(i, config=False)
    i.add_argument("inputs", nargs="+", help="raster files (.ldr) or corpus directories")
    i.add_argument("--out")
    i.add_argument("--test-flip", action="store_true")
    i.set_defaults(func=cmd_infer)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    import torch

    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except CheckpointError as exc:
        print(f"error: corrupted checkpoint: {exc}", file=sys.stderr)
        return EXIT_USER
    except (FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # invariant violations and bugs
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
