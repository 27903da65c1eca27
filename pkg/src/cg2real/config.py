"""Pipeline configuration with a flat dotted-key text format.

Every field has a default, so an empty file parses to the default config.
Serialization is canonical (sorted keys, repr-formatted floats) and round
trips byte-identically through parse_config_text.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path


@dataclass
class DataSection:
    n_stage1: int = 200
    n_stage2: int = 200
    n_real: int = 200
    n_test: int = 50
    resolution: int = 64
    spp: int = 1024
    bounces: int = 3
    root_seed: int = 1
    transform_seed: int = -1  # -1 derives the seed from root_seed


@dataclass
class Stage1Section:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-4
    seed: int = 0
    base_channels: int = 32
    n_res_blocks: int = 6
    w_perceptual: float = 10.0
    w_gan_image: float = 1.0
    w_gan_shading: float = 1.0
    filter_radius: int = 4
    filter_epsilon: float = 0.01
    mixed_precision: bool = True


@dataclass
class DecompSection:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-4
    seed: int = 0
    encoder_depth: int = 3
    base_channels: int = 32
    mixed_precision: bool = True


@dataclass
class Stage2Section:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-4
    seed: int = 0
    base_channels: int = 32
    n_res_blocks: int = 4
    lambda_cyc: float = 10.0
    w_gan_real: float = 1.0
    w_gan_pbr: float = 1.0
    pool_size: int = 50
    mixed_precision: bool = True


@dataclass
class TaskSection:
    epochs: int = 12
    batch_size: int = 8
    lr: float = 2e-4
    seed: int = 0
    base_channels: int = 32
    depth: int = 4
    mixed_precision: bool = True


@dataclass
class EvalSection:
    embed_seed: int = 0


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    decomp: DecompSection = field(default_factory=DecompSection)
    stage2: Stage2Section = field(default_factory=Stage2Section)
    task: TaskSection = field(default_factory=TaskSection)
    eval: EvalSection = field(default_factory=EvalSection)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def config_text(config: PipelineConfig, sections: tuple[str, ...] | None = None) -> str:
    """Serialize (a subset of) the config as sorted `key = value` lines."""
    lines = []
    for section_field in fields(config):
        if sections is not None and section_field.name not in sections:
            continue
        section = getattr(config, section_field.name)
        for f in fields(section):
            lines.append(f"{section_field.name}.{f.name} = "
                         f"{_format_value(getattr(section, f.name))}")
    return "\n".join(sorted(lines)) + "\n"


def parse_config_text(text: str) -> PipelineConfig:
    """Parse dotted `key = value` lines; unknown keys are errors."""
    config = PipelineConfig()
    section_fields = {
        s.name: {f.name: f for f in fields(getattr(config, s.name))}
        for s in fields(config)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', "
                             f"got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if "." not in key:
            raise ValueError(f"line {lineno}: key {key!r} is not dotted")
        section_name, _, field_name = key.partition(".")
        if section_name not in section_fields \
                or field_name not in section_fields[section_name]:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        ftype = section_fields[section_name][field_name].type
        section = getattr(config, section_name)
        try:
            if ftype in ("int", int):
                parsed = int(value)
            elif ftype in ("float", float):
                parsed = float(value)
            elif ftype in ("bool", bool):
                if value not in ("true", "false"):
                    raise ValueError(value)
                parsed = value == "true"
            else:
                parsed = value
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {value!r}"
                             ) from exc
        setattr(section, field_name, parsed)
    return config


def write_config(path: str | Path, config: PipelineConfig) -> None:
    Path(path).write_text(config_text(config))


def read_config(path: str | Path) -> PipelineConfig:
    return parse_config_text(Path(path).read_text())


def validate_config(config: PipelineConfig) -> list[str]:
    """Return every invariant violation; an empty list means the config is ok."""
    problems = []
    d = config.data
    for name in ("n_stage1", "n_stage2", "n_real", "n_test"):
        if getattr(d, name) < 1:
            problems.append(f"data.{name} must be >= 1")
    if not 16 <= d.resolution <= 256:
        problems.append("data.resolution must lie in [16, 256]")
    if d.spp < 1:
        problems.append("data.spp must be >= 1")
    if d.bounces < 1:
        problems.append("data.bounces must be >= 1")

    for name in ("stage1", "decomp", "stage2", "task"):
        section = getattr(config, name)
        if section.epochs < 1:
            problems.append(f"{name}.epochs must be >= 1")
        if section.batch_size < 1:
            problems.append(f"{name}.batch_size must be >= 1")
        if section.lr <= 0:
            problems.append(f"{name}.lr must be positive")

    s1 = config.stage1
    for name in ("w_perceptual", "w_gan_image", "w_gan_shading"):
        if getattr(s1, name) < 0:
            problems.append(f"stage1.{name} must be >= 0")
    if s1.w_perceptual == s1.w_gan_image == s1.w_gan_shading == 0:
        problems.append("stage1 needs at least one positive loss weight")
    if s1.filter_radius < 1:
        problems.append("stage1.filter_radius must be >= 1")
    elif s1.filter_radius > d.resolution // 2:
        problems.append("stage1.filter_radius too large for the resolution")
    if s1.filter_epsilon <= 0:
        problems.append("stage1.filter_epsilon must be positive")

    s2 = config.stage2
    if s2.lambda_cyc < 0:
        problems.append("stage2.lambda_cyc must be >= 0")
    for name in ("w_gan_real", "w_gan_pbr"):
        if getattr(s2, name) < 0:
            problems.append(f"stage2.{name} must be >= 0")
    if s2.pool_size < 0:
        problems.append("stage2.pool_size must be >= 0")

    if d.resolution % 4 != 0:
        problems.append("data.resolution not divisible by 4 "
                        "(generators downsample twice)")
    if d.resolution % 2 ** config.decomp.encoder_depth != 0 \
            or d.resolution // 2 ** config.decomp.encoder_depth < 2:
        problems.append("data.resolution not divisible into the "
                        "decomposition encoder's pyramid")
    if d.resolution % 2 ** config.task.depth != 0 \
            or d.resolution // 2 ** config.task.depth < 2:
        problems.append("data.resolution not divisible into the task "
                        "net's pyramid")
    return problems
