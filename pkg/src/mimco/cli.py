"""Command-line entry point.

    mimco <command> [--config FILE] [--teacher PATH] [--out DIR] [key.path=value ...]

Configuration is layered: dataclass defaults, then the YAML file, then
``key=value`` overrides in order (last writer wins). Every run writes the
resolved configuration to ``<output_dir>/config.yaml``; passing that file
back with the same command replays the run.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import multiprocessing
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .checkpoint import CheckpointError
from .config import ConfigError, apply_overrides, describe_fields, from_dict, to_dict
from .core import InvalidInputError, normalize_images
from .data import load_image_folder, make_shapes
from .encoder import EncoderConfig
from .evaluation import (export_embeddings, extract_embeddings, knn_eval, label_relevance,
                         retrieval_map)
from .stage1 import Stage1Config, TeacherBundle, freeze_teacher, random_teacher, train_stage1
from .trainer import (TrainConfig, TrainingDivergedError, TrainState, fit, load_checkpoint,
                      save_checkpoint)

log = logging.getLogger("mimco")

COMMANDS = ("pretrain-teacher", "pretrain-mimco", "eval-knn", "eval-retrieval",
            "export-embeddings", "ablate")

# matrix name -> (varied key, [(arm name, TrainConfig overrides)])
ABLATIONS = {
    "mask_ratio": ("train.mask_ratio", [
        ("ratio_0.5", {"mask_ratio": 0.5}),
        ("ratio_0.6", {"mask_ratio": 0.6}),
        ("ratio_0.7", {"mask_ratio": 0.7}),
    ]),
    "loss_terms": ("train.loss_mode", [
        ("patch_only", {"loss_mode": "patch_only"}),
        ("image_only", {"loss_mode": "image_only"}),
        ("patch_and_image", {"loss_mode": "mimco"}),
    ]),
    "patch_loss": ("train.loss_mode", [
        ("l1", {"loss_mode": "l1_patch"}),
        ("contrastive", {"loss_mode": "patch_only"}),
    ]),
    "multitask": ("train.loss_mode", [
        ("pixel_plus_image", {"loss_mode": "multitask_pixel_plus_image"}),
        ("mimco", {"loss_mode": "mimco"}),
    ]),
    "mask_off": ("train.loss_mode", [
        ("mask_off", {"loss_mode": "no_mask_distill"}),
        ("mask_on", {"loss_mode": "mimco"}),
    ]),
}


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | folder
    root: str | None = None
    labels_file: str = "labels.csv"
    n_train: int = 2000
    n_test: int = 500
    n_classes: int = 4
    noise: float = 0.06
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("synthetic", "folder"):
            raise InvalidInputError("source must be 'synthetic' or 'folder'")
        if self.source == "folder" and not self.root:
            raise InvalidInputError("root is required when source is 'folder'")
        if self.n_train < 1 or self.n_test < 1:
            raise InvalidInputError("n_train and n_test must be positive")
        if not 0 < self.test_fraction < 1:
            raise InvalidInputError("test_fraction must lie in (0, 1)")


@dataclass
class EvalConfig:
    k: int = 10
    batch_size: int = 256
    checkpoint: str | None = None  # teacher or training checkpoint; unset means random init
    split: str = "test"  # export-embeddings: train | test | all

    def __post_init__(self):
        if self.k < 1 or self.batch_size < 1:
            raise InvalidInputError("k and batch_size must be positive")
        if self.split not in ("train", "test", "all"):
            raise InvalidInputError("split must be train, test or all")


@dataclass
class AblateConfig:
    matrices: list[str] = field(default_factory=lambda: list(ABLATIONS))
    parallel: bool = False
    workers: int = 0  # 0 means one per CPU

    def __post_init__(self):
        bad = [m for m in self.matrices if m not in ABLATIONS]
        if bad:
            raise InvalidInputError(f"unknown matrix {bad[0]!r}; choose from {list(ABLATIONS)}")


@dataclass
class RunConfig:
    command: str = ""
    output_dir: str = "runs/mimco"
    seed: int | None = None  # when set, overrides stage1.seed and train.seed
    teacher: str | None = None
    resume: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)


# ------------------------------------------------------------------ config

def resolve_config(command: str, config_path=None, overrides=()) -> RunConfig:
    data: dict = {}
    if config_path is not None:
        try:
            data = yaml.safe_load(Path(config_path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"config file {config_path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config file {config_path}: top level must be a mapping")
    data = apply_overrides(data, overrides)
    data["command"] = command
    run = from_dict(RunConfig, data)
    if run.seed is not None:
        run.stage1 = dataclasses.replace(run.stage1, seed=run.seed)
        run.train = dataclasses.replace(run.train, seed=run.seed)
    size = run.encoder.image_size
    for key, aug in (("stage1.aug", run.stage1.aug), ("train.aug", run.train.aug)):
        if aug.output_size != size:
            raise ConfigError(f"{key}.output_size: {aug.output_size} does not match "
                              f"encoder.image_size {size}")
    return run


def write_snapshot(run: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(to_dict(run), sort_keys=False))


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


def write_report(path: Path, report: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(report), indent=2, sort_keys=True) + "\n")


# -------------------------------------------------------------------- data

@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray


def load_data(dc: DataConfig, image_size: int) -> Dataset:
    if dc.source == "synthetic":
        x, y = make_shapes(dc.n_train + dc.n_test, dc.n_classes, size=image_size, seed=dc.seed,
                           noise=dc.noise)
        return Dataset(x[:dc.n_train], y[:dc.n_train], x[dc.n_train:], y[dc.n_train:])
    x, y = load_image_folder(dc.root, dc.labels_file, size=image_size)
    perm = np.random.default_rng([dc.seed, 300]).permutation(len(x))
    n_test = max(1, int(round(dc.test_fraction * len(x))))
    te, tr = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return Dataset(x[tr], y[tr], x[te], y[te])


def _eval_inputs(run: RunConfig, images):
    return normalize_images(images, run.train.aug.mean, run.train.aug.std)


def evaluate_encoder(run: RunConfig, encoder, ds: Dataset) -> dict:
    bs = run.eval.batch_size
    train = extract_embeddings(encoder, _eval_inputs(run, ds.train_images), ds.train_labels,
                               batch_size=bs)
    test = extract_embeddings(encoder, _eval_inputs(run, ds.test_images), ds.test_labels,
                              batch_size=bs)
    return {"knn_top1": knn_eval(train, test, run.eval.k),
            "retrieval_map": retrieval_map(test, train, label_relevance(test, train))}


def _load_encoder(run: RunConfig):
    if run.eval.checkpoint is None:
        seed = run.seed if run.seed is not None else run.train.seed
        return random_teacher(run.encoder, seed), "random-init"
    bundle = TeacherBundle.load(run.eval.checkpoint)
    return bundle, run.eval.checkpoint


def _load_teacher(run: RunConfig, train_cfg: TrainConfig, path: str | None):
    if not train_cfg.uses_teacher:
        return None
    if not path:
        raise ConfigError(f"teacher: required for loss_mode {train_cfg.loss_mode!r}; "
                          "pass --teacher PATH or teacher=PATH")
    teacher = TeacherBundle.load(path)
    t, s = teacher.cfg, run.encoder
    if (t.embed_dim, t.image_size, t.token_patch) != (s.embed_dim, s.image_size, s.token_patch):
        raise ConfigError("teacher: encoder geometry (embed_dim, image_size, token_patch) "
                          f"{(t.embed_dim, t.image_size, t.token_patch)} differs from "
                          f"encoder {(s.embed_dim, s.image_size, s.token_patch)}")
    return teacher


# ---------------------------------------------------------------- commands

def _train_teacher(run: RunConfig, ds: Dataset, out: Path) -> TeacherBundle:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "stage1_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "lr", "loss"])
        state = train_stage1(run.stage1, run.encoder, ds.train_images,
                             log=lambda m: w.writerow([m["step"], m["epoch"], m["lr"], m["loss"]]))
    teacher = freeze_teacher(state)
    teacher.save(out / "teacher.ckpt")
    return teacher


def cmd_pretrain_teacher(run: RunConfig, out: Path) -> dict:
    ds = load_data(run.data, run.encoder.image_size)
    teacher = _train_teacher(run, ds, out)
    report = {"command": run.command, "teacher": "teacher.ckpt",
              "teacher_digest": teacher.digest(), "stage1_steps": teacher.metadata["stage1_steps"]}
    report.update(evaluate_encoder(run, teacher.encoder, ds))
    return report


def _train_student(run: RunConfig, train_cfg: TrainConfig, teacher, ds: Dataset, out: Path,
                   resume: str | None = None) -> tuple[TrainState, dict]:
    spe = len(ds.train_images) // train_cfg.batch_size
    if spe == 0:
        raise ConfigError(f"train.batch_size: {train_cfg.batch_size} exceeds the "
                          f"{len(ds.train_images)} training images")
    state = load_checkpoint(resume) if resume else TrainState(train_cfg, run.encoder, spe)
    last: dict = {}
    fit(state, ds.train_images, teacher, out_dir=out, on_step=last.update)
    save_checkpoint(state, out / "student.ckpt")
    return state, last


def cmd_pretrain_mimco(run: RunConfig, out: Path) -> dict:
    teacher = _load_teacher(run, run.train, run.teacher)
    ds = load_data(run.data, run.encoder.image_size)
    state, last = _train_student(run, run.train, teacher, ds, out, run.resume)
    report = {"command": run.command, "student": "student.ckpt", "steps": state.step,
              "teacher_digest": teacher.digest() if teacher is not None else None,
              "final_loss_total": last.get("loss_total"),
              "final_loss_patch": last.get("loss_patch"),
              "final_loss_image": last.get("loss_image")}
    report.update(evaluate_encoder(run, state.student, ds))
    return report


def cmd_eval_knn(run: RunConfig, out: Path) -> dict:
    bundle, source = _load_encoder(run)
    ds = load_data(run.data, run.encoder.image_size)
    bs = run.eval.batch_size
    train = extract_embeddings(bundle.encoder, _eval_inputs(run, ds.train_images),
                               ds.train_labels, batch_size=bs)
    test = extract_embeddings(bundle.encoder, _eval_inputs(run, ds.test_images),
                              ds.test_labels, batch_size=bs)
    return {"command": run.command, "checkpoint": source, "k": run.eval.k,
            "n_train": len(train), "n_test": len(test), "knn_top1": knn_eval(train, test, run.eval.k)}


def cmd_eval_retrieval(run: RunConfig, out: Path) -> dict:
    bundle, source = _load_encoder(run)
    ds = load_data(run.data, run.encoder.image_size)
    bs = run.eval.batch_size
    db = extract_embeddings(bundle.encoder, _eval_inputs(run, ds.train_images),
                            ds.train_labels, batch_size=bs)
    queries = extract_embeddings(bundle.encoder, _eval_inputs(run, ds.test_images),
                                 ds.test_labels, batch_size=bs)
    return {"command": run.command, "checkpoint": source, "n_queries": len(queries),
            "n_database": len(db), "relevance": "same label",
            "retrieval_map": retrieval_map(queries, db, label_relevance(queries, db))}


def cmd_export_embeddings(run: RunConfig, out: Path) -> dict:
    bundle, source = _load_encoder(run)
    ds = load_data(run.data, run.encoder.image_size)
    parts = {"train": [("train", ds.train_images, ds.train_labels)],
             "test": [("test", ds.test_images, ds.test_labels)]}
    parts["all"] = parts["train"] + parts["test"]
    ids, images, labels = [], [], []
    for name, x, y in parts[run.eval.split]:
        ids += [f"{name}/{i}" for i in range(len(x))]
        images.append(x)
        labels.append(y)
    emb = extract_embeddings(bundle.encoder, _eval_inputs(run, np.concatenate(images)),
                             np.concatenate(labels), ids=ids, batch_size=run.eval.batch_size)
    path = out / f"embeddings_{run.eval.split}.csv"
    out.mkdir(parents=True, exist_ok=True)
    export_embeddings(emb, path)
    return {"command": run.command, "checkpoint": source, "file": path.name,
            "rows": len(emb), "dim": int(emb.features.shape[1])}


def _run_arm(payload: dict) -> dict:
    """One ablation cell; a top-level function so worker processes can run it."""
    if payload.get("single_thread"):
        torch.set_num_threads(1)
    run = from_dict(RunConfig, payload["run"])
    train_cfg = dataclasses.replace(run.train, **payload["overrides"])
    out = Path(payload["out"])
    arm_run = dataclasses.replace(run, train=train_cfg)
    write_snapshot(arm_run, out)
    teacher = _load_teacher(run, train_cfg, payload["teacher"])
    ds = load_data(run.data, run.encoder.image_size)
    state, last = _train_student(arm_run, train_cfg, teacher, ds, out)
    cell = {"arm": payload["arm"], "overrides": payload["overrides"], "steps": state.step,
            "final_loss_total": last.get("loss_total"),
            "final_loss_patch": last.get("loss_patch"),
            "final_loss_image": last.get("loss_image")}
    cell.update(evaluate_encoder(arm_run, state.student, ds))
    return cell


def cmd_ablate(run: RunConfig, out: Path) -> dict:
    ds = None
    if run.teacher:
        teacher_path = run.teacher
        digest = TeacherBundle.load(teacher_path).digest()
    else:
        ds = load_data(run.data, run.encoder.image_size)
        teacher = _train_teacher(run, ds, out)
        teacher_path, digest = str(out / "teacher.ckpt"), teacher.digest()
    jobs = []
    for matrix in run.ablate.matrices:
        for arm, overrides in ABLATIONS[matrix][1]:
            jobs.append((matrix, {"run": to_dict(run), "arm": arm, "overrides": overrides,
                                  "teacher": teacher_path,
                                  "out": str(out / "ablate" / matrix / arm),
                                  "single_thread": run.ablate.parallel}))
    if run.ablate.parallel:
        workers = run.ablate.workers or multiprocessing.cpu_count()
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            cells = list(pool.map(_run_arm, [p for _, p in jobs]))
    else:
        cells = []
        for matrix, p in jobs:
            log.info("ablate %s / %s", matrix, p["arm"])
            cells.append(_run_arm(p))
    reports = {}
    for matrix in run.ablate.matrices:
        rows = [c for (m, _), c in zip(jobs, cells) if m == matrix]
        report = {"matrix": matrix, "varied": ABLATIONS[matrix][0], "teacher_digest": digest,
                  "seed": run.train.seed, "cells": rows}
        write_report(out / "ablate" / matrix / "report.json", report)
        reports[matrix] = f"ablate/{matrix}/report.json"
    return {"command": run.command, "teacher_digest": digest, "reports": reports}


HANDLERS = {
    "pretrain-teacher": cmd_pretrain_teacher,
    "pretrain-mimco": cmd_pretrain_mimco,
    "eval-knn": cmd_eval_knn,
    "eval-retrieval": cmd_eval_retrieval,
    "export-embeddings": cmd_export_embeddings,
    "ablate": cmd_ablate,
}

REPORT_NAMES = {
    "pretrain-teacher": "report.json",
    "pretrain-mimco": "report.json",
    "eval-knn": "eval_knn.json",
    "eval-retrieval": "eval_retrieval.json",
    "export-embeddings": "export.json",
    "ablate": "ablate_summary.json",
}


# --------------------------------------------------------------------- main

def _keys_help() -> str:
    lines = ["configuration keys (set in --config YAML or as key=value; defaults shown):"]
    for key, default in describe_fields(RunConfig):
        if key == "command":
            continue
        if isinstance(default, tuple):
            default = list(default)
        lines.append(f"  {key} = {json.dumps(default)}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with nested configuration keys")
    common.add_argument("--out", help="output directory (same as output_dir=...)")
    common.add_argument("--teacher", help="teacher checkpoint (same as teacher=...)")
    common.add_argument("--checkpoint", help="encoder to evaluate (same as eval.checkpoint=...)")
    common.add_argument("--parallel", action="store_true",
                        help="ablate: run arms in worker processes (same as ablate.parallel=true)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common.add_argument("overrides", nargs="*", metavar="key=value",
                        help="configuration overrides applied after --config, in order")
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="mimco", description=__doc__.split("\n\n")[0],
                                     epilog=_keys_help(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "pretrain-teacher": "stage 1: train and freeze the contrastive teacher",
        "pretrain-mimco": "stage 2: train the masked student against a frozen teacher",
        "eval-knn": "kNN accuracy of an encoder's pooled features",
        "eval-retrieval": "retrieval mAP (test queries against the training set)",
        "export-embeddings": "write pooled features to CSV",
        "ablate": "run ablation matrices and write one report per matrix",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], epilog=_keys_help(),
                       formatter_class=fmt)
    return parser


def run(command: str, config_path=None, overrides=()) -> dict:
    """Resolve the configuration, execute `command` and write its report. Returns the report."""
    cfg = resolve_config(command, config_path, overrides)
    out = Path(cfg.output_dir)
    write_snapshot(cfg, out)
    report = HANDLERS[command](cfg, out)
    write_report(out / REPORT_NAMES[command], report)
    return report


def main(argv=None) -> int:
    parser = build_parser()
    # overrides may follow flags, which argparse leaves in `extra`; command-line order is kept
    args, extra = parser.parse_known_args(argv)
    bad = [e for e in extra if e.startswith("-") or "=" not in e]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides) + extra
    # explicit flags are applied last so they win over the file and positional overrides
    for flag, key in (("out", "output_dir"), ("teacher", "teacher"), ("checkpoint", "eval.checkpoint")):
        val = getattr(args, flag)
        if val is not None:
            overrides.append(f"{key}={json.dumps(val)}")
    if args.parallel:
        overrides.append("ablate.parallel=true")
    try:
        report = run(args.command, args.config, overrides)
    except ConfigError as e:
        print(f"mimco: config error: {e}", file=sys.stderr)
        return 2
    except (CheckpointError, TrainingDivergedError, InvalidInputError, OSError) as e:
        print(f"mimco: error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(_json_safe(report), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
