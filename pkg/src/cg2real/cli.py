"""Command-line entrypoint for the translation pipeline.

Exit codes: 0 on success, 2 for configuration problems, 3 when a stage
fails at runtime.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .config import PipelineConfig, read_config, validate_config, write_config
from .datagen import build_datasets, load_pair, read_manifest
from .imaging import read_cg2r
from .metrics import (
    embed_images,
    evaluate_task,
    frechet_distance,
    load_task_checkpoint,
    save_task_checkpoint,
    train_task_net,
)
from .nets import load_net, save_net
from .pipeline import (
    StageFailure,
    _save_stage2,
    decomp_config_from,
    load_real_images,
    run_pipeline,
    stage1_config_from,
    stage2_config_from,
    task_config_from,
    translate_directory,
)
from .stage1 import CSV_FIELDS as STAGE1_CSV_FIELDS
from .stage1 import history_csv, train_stage1
from .stage2 import (
    DECOMP_CSV_FIELDS,
    STAGE2_CSV_FIELDS,
    TranslationSet,
    decomp_triples_from_pairs,
    pretrain_decomposition,
    train_stage2,
)


class ConfigError(Exception):
    """A problem with configuration or arguments, reported with exit code 2."""


def _load_config(path: str | None) -> PipelineConfig:
    if path is None:
        config = PipelineConfig()
    else:
        try:
            config = read_config(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    problems = validate_config(config)
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return config


def _load_pairs(data_root: str, split: str):
    try:
        manifest = read_manifest(data_root)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read dataset manifest under {data_root}: "
                          f"{exc}") from exc
    if split not in manifest.splits:
        raise ConfigError(f"dataset has no split {split!r}")
    return manifest, [load_pair(d) for d in manifest.scene_dirs(split)]


def _cmd_validate(args) -> int:
    try:
        config = read_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    problems = validate_config(config)
    if problems:
        for problem in problems:
            print(problem)
        return 2
    print("ok")
    return 0


def _cmd_datagen(args) -> int:
    config = _load_config(args.config)
    d = config.data
    transform_seed = None if d.transform_seed < 0 else d.transform_seed
    manifest = build_datasets(d.n_stage1, d.n_stage2, d.n_real, d.n_test,
                              d.root_seed, args.out,
                              resolution=d.resolution, spp=d.spp,
                              bounces=d.bounces,
                              transform_seed=transform_seed)
    total = sum(count for _, count in manifest.splits.values())
    print(f"rendered {total} scenes into {args.out}")
    return 0


def _cmd_train_stage1(args) -> int:
    config = _load_config(args.config)
    manifest, pairs = _load_pairs(args.data, "stage1")
    heldout = None
    if "test" in manifest.splits:
        heldout = [load_pair(d) for d in manifest.scene_dirs("test")]
    result = train_stage1(pairs, stage1_config_from(config), heldout=heldout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_net(out / "generator.ckpt", result.generator, "generator",
             result.generator.spec)
    (out / "history.csv").write_text(history_csv(result.history,
                                                 STAGE1_CSV_FIELDS))
    print(f"stage-1 generator saved to {out / 'generator.ckpt'}")
    return 0


def _cmd_pretrain_decomp(args) -> int:
    config = _load_config(args.config)
    _, pairs = _load_pairs(args.data, "stage2")
    stage1_gen = load_net(args.stage1) if args.stage1 else None
    result = pretrain_decomposition(
        decomp_triples_from_pairs(pairs, stage1_gen),
        decomp_config_from(config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_net(out / "decomp.ckpt", result.net, "decomp", result.net.spec)
    (out / "history.csv").write_text(history_csv(result.history,
                                                 DECOMP_CSV_FIELDS))
    print(f"decomposition net saved to {out / 'decomp.ckpt'}")
    return 0


def _cmd_train_stage2(args) -> int:
    config = _load_config(args.config)
    manifest, pairs = _load_pairs(args.data, "stage2")
    if "real" not in manifest.splits:
        raise ConfigError("dataset has no real split")
    stage1_gen = load_net(args.stage1) if args.stage1 else None
    try:
        decomp = load_net(args.decomp)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load decomposition checkpoint: {exc}"
                          ) from exc
    pbr = TranslationSet.from_pairs(pairs, stage1_gen)
    real = torch.stack([img.to_tensor()
                        for img in load_real_images(manifest, "real")])
    result = train_stage2(pbr, real, decomp, stage2_config_from(config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_stage2(out, result.nets)
    (out / "history.csv").write_text(history_csv(result.history,
                                                 STAGE2_CSV_FIELDS))
    print(f"stage-2 generators saved to {out}")
    return 0


def _cmd_translate(args) -> int:
    written = translate_directory(args.in_dir, args.out, stage=args.stage,
                                  stage1_ckpt=args.stage1,
                                  stage2_dir=args.stage2_dir)
    print(f"wrote {len(written)} buffers to {args.out}")
    return 0


def _collect_images(set_dir: str, buffer: str | None):
    root = Path(set_dir)
    if not root.is_dir():
        raise ConfigError(f"{set_dir} is not a directory")
    pattern = f"**/{buffer}.cg2r" if buffer else "**/*.cg2r"
    paths = sorted(root.glob(pattern))
    if len(paths) < 2:
        raise ConfigError(f"need at least 2 images under {set_dir} "
                          f"(pattern {pattern})")
    return [read_cg2r(p) for p in paths]


def _cmd_eval_fid(args) -> int:
    a = _collect_images(args.set_a, args.buffer)
    b = _collect_images(args.set_b, args.buffer)
    fid = frechet_distance(embed_images(a, seed=args.seed),
                           embed_images(b, seed=args.seed))
    print(f"fid = {fid!r}")
    return 0


def _task_tensors(data_root: str, split: str, task: str, buffer: str):
    manifest, pairs = _load_pairs(data_root, split)
    if buffer == "image_real":
        images = torch.stack([img.to_tensor()
                              for img in load_real_images(manifest, split)])
    else:
        images = torch.stack([getattr(p, buffer).to_tensor() for p in pairs])
    key = "normal" if task == "normal" else "depth"
    labels = torch.stack([getattr(p, key).to_tensor() for p in pairs])
    return images, labels


def _cmd_train_task(args) -> int:
    config = _load_config(args.config)
    images, labels = _task_tensors(args.data, args.split, args.task,
                                   args.buffer)
    result = train_task_net(images, labels,
                            task_config_from(config, args.task))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_task_checkpoint(out, result)
    print(f"{args.task} net saved to {out}")
    return 0


def _cmd_eval_task(args) -> int:
    try:
        result = load_task_checkpoint(args.ckpt)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load task checkpoint: {exc}") from exc
    images, labels = _task_tensors(args.data, args.split, result.task,
                                   args.buffer)
    metrics = evaluate_task(result, images, labels)
    items = metrics.as_dict()
    lines = [",".join(items), ",".join(repr(v) for v in items.values())]
    report = "\n".join(lines) + "\n"
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report)
    print(report, end="")
    return 0


def _cmd_run_all(args) -> int:
    config = _load_config(args.config)
    report = run_pipeline(config, args.out)
    print(report.summary(), end="")
    return 0


def _cmd_init_config(args) -> int:
    write_config(args.out, PipelineConfig())
    print(f"default config written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cg2real",
        description="Two-stage synthetic-to-real image translation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("datagen", _cmd_datagen, "render the scene datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = add("train-stage1", _cmd_train_stage1,
            "train the shading refinement generator")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = add("pretrain-decomp", _cmd_pretrain_decomp,
            "pretrain the intrinsic decomposition net")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage1", help="stage-1 generator checkpoint")
    p.add_argument("--config")

    p = add("train-stage2", _cmd_train_stage2,
            "train the unpaired translation generators")
    p.add_argument("--data", required=True)
    p.add_argument("--decomp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage1", help="stage-1 generator checkpoint")
    p.add_argument("--config")

    p = add("translate", _cmd_translate, "translate a directory of scenes")
    p.add_argument("--stage", choices=("all", "1", "2"), default="all")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage1", help="stage-1 generator checkpoint")
    p.add_argument("--stage2-dir", help="stage-2 checkpoint directory")

    p = add("eval-fid", _cmd_eval_fid,
            "Frechet distance between two image sets")
    p.add_argument("--set-a", required=True)
    p.add_argument("--set-b", required=True)
    p.add_argument("--buffer", help="restrict to one buffer name")
    p.add_argument("--seed", type=int, default=0)

    p = add("train-task", _cmd_train_task, "train a dense-prediction net")
    p.add_argument("--task", choices=("normal", "depth"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="stage2")
    p.add_argument("--buffer", default="image_pbr")
    p.add_argument("--config")

    p = add("eval-task", _cmd_eval_task, "evaluate a task checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="CSV output path")
    p.add_argument("--split", default="test")
    p.add_argument("--buffer", default="image_real")

    p = add("run-all", _cmd_run_all, "run the full pipeline")
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = add("validate", _cmd_validate, "check a config file")
    p.add_argument("--config", required=True)

    p = add("init-config", _cmd_init_config, "write the default config")
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - uniform stage-failure exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
