"""End-to-end orchestration: data, both stages, decomposition, evaluation.

Each stage writes its outputs plus a content hash of (config subset, input
hashes) into its own directory; a re-run with matching hashes loads the
cached outputs instead of recomputing. Hashes chain, so editing any
upstream setting invalidates everything downstream.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import PipelineConfig, config_text, write_config
from .datagen import (
    REAL_BUFFER,
    DatasetManifest,
    build_datasets,
    load_pair,
    read_manifest,
)
from .imaging import ImageF, read_cg2r, write_cg2r, write_png_preview
from .metrics import TaskConfig, embed_images, evaluate_task, frechet_distance, train_task_net
from .nets import load_net, save_net
from .ops import GuidedFilterParams
from .stage1 import Stage1Config, Stage1LossWeights, history_csv, train_stage1
from .stage1 import CSV_FIELDS as STAGE1_CSV_FIELDS
from .stage2 import (
    DECOMP_CSV_FIELDS,
    STAGE2_CSV_FIELDS,
    DecompConfig,
    LogSpaceGenerator,
    Stage2Config,
    Stage2LossWeights,
    Stage2Nets,
    TranslationSet,
    decomp_triples_from_pairs,
    pretrain_decomposition,
    train_stage2,
    translate_stage2,
)


class StageFailure(RuntimeError):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def stage1_config_from(config: PipelineConfig) -> Stage1Config:
    s = config.stage1
    return Stage1Config(
        epochs=s.epochs, batch_size=s.batch_size, lr=s.lr, seed=s.seed,
        weights=Stage1LossWeights(s.w_perceptual, s.w_gan_image,
                                  s.w_gan_shading),
        filter_params=GuidedFilterParams(s.filter_radius, s.filter_epsilon),
        base_channels=s.base_channels, n_res_blocks=s.n_res_blocks,
        mixed_precision=s.mixed_precision)


def decomp_config_from(config: PipelineConfig) -> DecompConfig:
    s = config.decomp
    return DecompConfig(epochs=s.epochs, batch_size=s.batch_size, lr=s.lr,
                        seed=s.seed, encoder_depth=s.encoder_depth,
                        base_channels=s.base_channels,
                        mixed_precision=s.mixed_precision)


def stage2_config_from(config: PipelineConfig) -> Stage2Config:
    s = config.stage2
    return Stage2Config(
        epochs=s.epochs, batch_size=s.batch_size, lr=s.lr, seed=s.seed,
        weights=Stage2LossWeights(s.lambda_cyc, s.w_gan_real, s.w_gan_pbr),
        base_channels=s.base_channels, n_res_blocks=s.n_res_blocks,
        pool_size=s.pool_size, mixed_precision=s.mixed_precision)


def task_config_from(config: PipelineConfig, task: str,
                     seed: int | None = None) -> TaskConfig:
    s = config.task
    return TaskConfig(task=task, epochs=s.epochs, batch_size=s.batch_size,
                      lr=s.lr, seed=s.seed if seed is None else seed,
                      base_channels=s.base_channels, depth=s.depth,
                      mixed_precision=s.mixed_precision)


def _hash(*parts: str) -> str:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part.encode())
        digest.update(b"\x00")
    return digest.hexdigest()


def _cached(stage_dir: Path, want: str, outputs: list[Path]) -> bool:
    marker = stage_dir / "stage.hash"
    return (marker.exists() and marker.read_text().strip() == want
            and all(p.exists() for p in outputs))


def _mark(stage_dir: Path, value: str) -> None:
    (stage_dir / "stage.hash").write_text(value + "\n")


def load_real_images(manifest: DatasetManifest, split: str) -> list[ImageF]:
    return [read_cg2r(d / f"{REAL_BUFFER}.cg2r")
            for d in manifest.scene_dirs(split)]


def _ensure_data(config: PipelineConfig, out_dir: Path) -> tuple[DatasetManifest, str]:
    stage_dir = out_dir / "data"
    want = _hash("data", config_text(config, sections=("data",)))
    manifest_path = stage_dir / "manifest"
    if _cached(stage_dir, want, [manifest_path]):
        return read_manifest(stage_dir), want
    d = config.data
    transform_seed = None if d.transform_seed < 0 else d.transform_seed
    manifest = build_datasets(d.n_stage1, d.n_stage2, d.n_real, d.n_test,
                              d.root_seed, stage_dir,
                              resolution=d.resolution, spp=d.spp,
                              bounces=d.bounces,
                              transform_seed=transform_seed)
    _mark(stage_dir, want)
    return manifest, want


def _ensure_stage1(config: PipelineConfig, out_dir: Path,
                   manifest: DatasetManifest, data_hash: str):
    stage_dir = out_dir / "stage1"
    ckpt = stage_dir / "generator.ckpt"
    want = _hash("stage1", config_text(config, sections=("stage1",)),
                 data_hash)
    if _cached(stage_dir, want, [ckpt]):
        return load_net(ckpt), want
    stage_dir.mkdir(parents=True, exist_ok=True)
    pairs = [load_pair(d) for d in manifest.scene_dirs("stage1")]
    heldout = [load_pair(d) for d in manifest.scene_dirs("test")]
    result = train_stage1(pairs, stage1_config_from(config), heldout=heldout)
    save_net(ckpt, result.generator, "generator", result.generator.spec)
    (stage_dir / "history.csv").write_text(
        history_csv(result.history, STAGE1_CSV_FIELDS))
    _mark(stage_dir, want)
    return result.generator, want


def _ensure_decomp(config: PipelineConfig, out_dir: Path,
                   manifest: DatasetManifest, stage1_gen, stage1_hash: str):
    stage_dir = out_dir / "decomp"
    ckpt = stage_dir / "decomp.ckpt"
    want = _hash("decomp", config_text(config, sections=("decomp",)),
                 stage1_hash)
    if _cached(stage_dir, want, [ckpt]):
        return load_net(ckpt), want
    stage_dir.mkdir(parents=True, exist_ok=True)
    pairs = [load_pair(d) for d in manifest.scene_dirs("stage2")]
    heldout = [load_pair(d) for d in manifest.scene_dirs("test")]
    result = pretrain_decomposition(
        decomp_triples_from_pairs(pairs, stage1_gen),
        decomp_config_from(config),
        heldout=decomp_triples_from_pairs(heldout, stage1_gen))
    save_net(ckpt, result.net, "decomp", result.net.spec)
    (stage_dir / "history.csv").write_text(
        history_csv(result.history, DECOMP_CSV_FIELDS))
    (stage_dir / "heldout.txt").write_text(
        f"albedo_mse = {result.heldout_albedo_mse!r}\n"
        f"shading_mse = {result.heldout_shading_mse!r}\n"
        f"recon_mae = {result.heldout_recon_mae!r}\n")
    _mark(stage_dir, want)
    return result.net, want


_STAGE2_CKPTS = ("gen_albedo", "gen_shading", "gen_backward")


def _save_stage2(stage_dir: Path, nets: Stage2Nets) -> None:
    save_net(stage_dir / "gen_albedo.ckpt", nets.gen_albedo, "generator",
             nets.gen_albedo.spec)
    for name in ("gen_shading", "gen_backward"):
        inner = getattr(nets, name).net
        save_net(stage_dir / f"{name}.ckpt", inner, "generator", inner.spec)


def _load_stage2(stage_dir: Path) -> Stage2Nets:
    return Stage2Nets(
        gen_albedo=load_net(stage_dir / "gen_albedo.ckpt"),
        gen_shading=LogSpaceGenerator(load_net(stage_dir / "gen_shading.ckpt")),
        gen_backward=LogSpaceGenerator(load_net(stage_dir / "gen_backward.ckpt")),
        disc_real=None, disc_pbr=None)


def _ensure_stage2(config: PipelineConfig, out_dir: Path,
                   manifest: DatasetManifest, stage1_gen, decomp,
                   decomp_hash: str):
    stage_dir = out_dir / "stage2"
    ckpts = [stage_dir / f"{n}.ckpt" for n in _STAGE2_CKPTS]
    want = _hash("stage2", config_text(config, sections=("stage2",)),
                 decomp_hash)
    if _cached(stage_dir, want, ckpts):
        return _load_stage2(stage_dir), want
    stage_dir.mkdir(parents=True, exist_ok=True)
    pairs = [load_pair(d) for d in manifest.scene_dirs("stage2")]
    pbr = TranslationSet.from_pairs(pairs, stage1_gen)
    real = torch.stack([img.to_tensor()
                        for img in load_real_images(manifest, "real")])
    result = train_stage2(pbr, real, decomp, stage2_config_from(config))
    _save_stage2(stage_dir, result.nets)
    (stage_dir / "history.csv").write_text(
        history_csv(result.history, STAGE2_CSV_FIELDS))
    _mark(stage_dir, want)
    return result.nets, want


REPORT_ROWS = ("gl", "stage1", "stage2")
REPORT_COLUMNS = ("fid", "normal_mean_angle", "normal_median_angle",
                  "normal_pct_below_11_25", "normal_pct_below_22_5",
                  "normal_pct_below_30", "depth_rmse", "depth_rmse_log",
                  "depth_pct_delta_1", "depth_pct_delta_2",
                  "depth_pct_delta_3")


@dataclass
class PipelineReport:
    """Three-way comparison of the raw, refined, and translated domains."""

    rows: dict[str, dict[str, float]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("set",) + REPORT_COLUMNS)
        for name in REPORT_ROWS:
            writer.writerow([name] + [repr(self.rows[name][c])
                                      for c in REPORT_COLUMNS])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "PipelineReport":
        reader = csv.DictReader(io.StringIO(text))
        rows = {}
        for record in reader:
            name = record.pop("set")
            rows[name] = {k: float(v) for k, v in record.items()}
        return PipelineReport(rows)

    def summary(self) -> str:
        lines = ["training set     fid        mean angle  depth rmse"]
        for name in REPORT_ROWS:
            row = self.rows[name]
            lines.append(f"{name:<16} {row['fid']:<10.4f} "
                         f"{row['normal_mean_angle']:<11.2f} "
                         f"{row['depth_rmse']:.4f}")
        return "\n".join(lines) + "\n"


def _translation_sets(manifest: DatasetManifest, split: str, stage1_gen,
                      stage2_nets) -> dict[str, torch.Tensor]:
    """Images of one split under the three training-set variants."""
    pairs = [load_pair(d) for d in manifest.scene_dirs(split)]
    gl = torch.stack([p.image_gl.to_tensor() for p in pairs])
    refined = TranslationSet.from_pairs(pairs, stage1_gen)
    translated = translate_stage2(stage2_nets, refined)
    return {"gl": gl, "stage1": refined.image,
            "stage2": translated["image"],
            "normal": torch.stack([p.normal.to_tensor() for p in pairs]),
            "depth": torch.stack([p.depth.to_tensor() for p in pairs])}


def _ensure_eval(config: PipelineConfig, out_dir: Path,
                 manifest: DatasetManifest, stage1_gen, stage2_nets,
                 stage2_hash: str):
    stage_dir = out_dir / "eval"
    report_path = stage_dir / "report.csv"
    want = _hash("eval", config_text(config, sections=("task", "eval")),
                 stage2_hash)
    if _cached(stage_dir, want, [report_path]):
        return PipelineReport.from_csv(report_path.read_text()), want
    stage_dir.mkdir(parents=True, exist_ok=True)

    real_pool = torch.stack([img.to_tensor()
                             for img in load_real_images(manifest, "real")])
    real_stats = embed_images(real_pool, seed=config.eval.embed_seed)
    train_sets = _translation_sets(manifest, "stage2", stage1_gen,
                                   stage2_nets)
    test_sets = _translation_sets(manifest, "test", stage1_gen, stage2_nets)
    test_real = torch.stack([img.to_tensor()
                             for img in load_real_images(manifest, "test")])

    rows = {}
    for name in REPORT_ROWS:
        fid = frechet_distance(
            embed_images(train_sets[name], seed=config.eval.embed_seed),
            real_stats)
        row = {"fid": fid}
        normal_res = train_task_net(train_sets[name], train_sets["normal"],
                                    task_config_from(config, "normal"))
        nm = evaluate_task(normal_res, test_real, test_sets["normal"])
        row.update({f"normal_{k}": v for k, v in nm.as_dict().items()})
        depth_res = train_task_net(train_sets[name], train_sets["depth"],
                                   task_config_from(config, "depth"))
        dm = evaluate_task(depth_res, test_real, test_sets["depth"])
        row.update({f"depth_{k}": v for k, v in dm.as_dict().items()})
        rows[name] = row

    report = PipelineReport(rows)
    report_path.write_text(report.to_csv())
    (stage_dir / "summary.txt").write_text(report.summary())
    _mark(stage_dir, want)
    return report, want


def run_pipeline(config: PipelineConfig, out_dir: str | Path) -> PipelineReport:
    """Run (or resume) the full pipeline and return the final report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(out_dir / "config.txt", config)

    stage = "datagen"
    try:
        manifest, data_hash = _ensure_data(config, out_dir)
        stage = "stage1"
        stage1_gen, stage1_hash = _ensure_stage1(config, out_dir, manifest,
                                                 data_hash)
        stage = "decomp"
        decomp, decomp_hash = _ensure_decomp(config, out_dir, manifest,
                                             stage1_gen, stage1_hash)
        stage = "stage2"
        stage2_nets, stage2_hash = _ensure_stage2(config, out_dir, manifest,
                                                  stage1_gen, decomp,
                                                  decomp_hash)
        stage = "eval"
        report, _ = _ensure_eval(config, out_dir, manifest, stage1_gen,
                                 stage2_nets, stage2_hash)
    except StageFailure:
        raise
    except Exception as exc:
        raise StageFailure(stage, exc) from exc
    return report


def translate_directory(in_dir: str | Path, out_dir: str | Path,
                        stage: str = "all",
                        stage1_ckpt: str | Path | None = None,
                        stage2_dir: str | Path | None = None,
                        batch_size: int = 8) -> list[Path]:
    """Translate every scene directory under in_dir; write buffers + previews.

    stage selects how far to push each scene: "1" refines shading only,
    "2" assumes the inputs are already refined, "all" chains both.
    """
    if stage not in ("all", "1", "2"):
        raise ValueError(f"unknown stage selection {stage!r}")
    in_dir = Path(in_dir)
    out_dir = Path(out_dir)
    scene_dirs = sorted(d for d in in_dir.iterdir() if d.is_dir())
    if not scene_dirs:
        raise ValueError(f"no scene directories under {in_dir}")
    pairs = [load_pair(d) for d in scene_dirs]

    stage1_gen = None
    if stage in ("all", "1"):
        if stage1_ckpt is None:
            raise ValueError("stage-1 translation needs a checkpoint")
        stage1_gen = load_net(stage1_ckpt)
    ts = TranslationSet.from_pairs(pairs, stage1_gen, batch_size)

    outputs = {"shading_refined": ts.shading, "image_refined": ts.image}
    if stage in ("all", "2"):
        if stage2_dir is None:
            raise ValueError("stage-2 translation needs a checkpoint "
                             "directory")
        nets = _load_stage2(Path(stage2_dir))
        translated = translate_stage2(nets, ts, batch_size)
        outputs.update({"albedo_real": translated["albedo"],
                        "shading_real": translated["shading"],
                        "image_real": translated["image"]})

    written = []
    for i, scene_dir in enumerate(scene_dirs):
        dest = out_dir / scene_dir.name
        dest.mkdir(parents=True, exist_ok=True)
        for name, tensor in outputs.items():
            img = ImageF.from_tensor(tensor[i])
            write_cg2r(dest / f"{name}.cg2r", img)
            write_png_preview(dest / f"{name}.png", img)
            written.append(dest / f"{name}.cg2r")
    return written
