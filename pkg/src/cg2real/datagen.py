"""Procedural scene generation and dataset construction.

Scenes are closed axis-aligned box rooms with box obstacles, one rectangular
ceiling light, and a pinhole camera. Every scene renders to a pixel-aligned
set of buffers: ground-truth albedo, normals, depth, a flat direct-only
shading (no shadows, no falloff), and a path-traced global-illumination
shading. The "real" domain is built from held-out GI renders passed through
a fixed hidden appearance transform (:func:`realize`).

Everything is deterministic: scenes are pure functions of their seed, and a
dataset is a pure function of (root_seed, counts, resolution, spp).
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import ImageF, read_cg2r, write_cg2r
from .tracer import render_kernel

PAIR_BUFFERS = ("albedo", "normal", "depth", "shading_gl", "shading_pbr",
                "image_gl", "image_pbr")
REAL_BUFFER = "image_real"
SPLITS = ("stage1", "stage2", "real", "test")

_MAT_MODES = {"solid": 0, "checker": 1, "stripes": 2}


@dataclass(frozen=True)
class Material:
    mode: str  # solid | checker | stripes
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    scale: float = 0.5

    def __post_init__(self):
        if self.mode not in _MAT_MODES:
            raise ValueError(f"unknown material mode {self.mode!r}")
        for col in (self.color_a, self.color_b):
            if not all(0.0 <= c <= 1.0 for c in col):
                raise ValueError(f"albedo color out of [0,1]: {col}")
        if self.scale <= 0:
            raise ValueError("pattern scale must be positive")


@dataclass(frozen=True)
class BoxSpec:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    material: Material


@dataclass(frozen=True)
class LightSpec:
    center: tuple[float, float, float]
    half_u: float
    half_v: float
    radiance: tuple[float, float, float]

    def __post_init__(self):
        if not all(r > 0 for r in self.radiance):
            raise ValueError("light radiance must be positive")

    @property
    def area(self) -> float:
        return 4.0 * self.half_u * self.half_v


@dataclass(frozen=True)
class CameraSpec:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    vfov_deg: float


@dataclass(frozen=True)
class SceneSpec:
    """Full description of one renderable scene; a pure function of seed."""

    seed: int
    room: tuple[float, float, float]  # extents; the room spans [0, room]
    wall_materials: tuple[Material, ...]  # 6, face order -x +x -y +y -z +z
    boxes: tuple[BoxSpec, ...]
    light: LightSpec
    camera: CameraSpec

    def __post_init__(self):
        if len(self.wall_materials) != 6:
            raise ValueError("need exactly 6 wall materials")
        p = self.camera.position
        if not all(0.0 < p[a] < self.room[a] for a in range(3)):
            raise ValueError("camera must be inside the room")

    @staticmethod
    def sample(seed: int) -> "SceneSpec":
        rng = np.random.default_rng(seed)

        def color(lo, hi):
            return tuple(float(c) for c in rng.uniform(lo, hi, size=3))

        def material(p_pattern, lo, hi):
            if rng.uniform() < p_pattern:
                mode = "checker" if rng.uniform() < 0.7 else "stripes"
                return Material(mode, color(lo, hi), color(lo, hi),
                                scale=float(rng.uniform(0.3, 0.8)))
            return Material("solid", color(lo, hi), color(lo, hi))

        rx = float(rng.uniform(4.0, 6.0))
        ry = float(rng.uniform(2.6, 3.2))
        rz = float(rng.uniform(4.0, 6.0))

        walls = (
            material(0.25, 0.25, 0.85),  # -x
            material(0.25, 0.25, 0.85),  # +x
            material(0.50, 0.20, 0.85),  # floor
            Material("solid", color(0.70, 0.90), color(0.70, 0.90)),  # ceiling
            material(0.25, 0.25, 0.85),  # -z
            material(0.25, 0.25, 0.85),  # +z
        )

        light = LightSpec(
            center=(rx / 2.0 + float(rng.uniform(-0.5, 0.5)),
                    ry - 1e-3,
                    rz / 2.0 + float(rng.uniform(-0.5, 0.5))),
            half_u=float(rng.uniform(0.3, 0.6)),
            half_v=float(rng.uniform(0.3, 0.6)),
            radiance=tuple(float(rng.uniform(12.0, 20.0) * rng.uniform(0.95, 1.05))
                           for _ in range(3)),
        )

        # camera near one of the four walls, aimed toward the room interior
        side = int(rng.integers(4))
        margin = float(rng.uniform(0.4, 1.0))
        if side == 0:
            cpos = (margin, 0.0, float(rng.uniform(0.8, rz - 0.8)))
        elif side == 1:
            cpos = (rx - margin, 0.0, float(rng.uniform(0.8, rz - 0.8)))
        elif side == 2:
            cpos = (float(rng.uniform(0.8, rx - 0.8)), 0.0, margin)
        else:
            cpos = (float(rng.uniform(0.8, rx - 0.8)), 0.0, rz - margin)
        cpos = (cpos[0], float(rng.uniform(1.2, 1.9)), cpos[2])
        look = (rx / 2.0 + float(rng.uniform(-0.8, 0.8)),
                float(rng.uniform(0.5, 1.3)),
                rz / 2.0 + float(rng.uniform(-0.8, 0.8)))
        camera = CameraSpec(cpos, look, vfov_deg=float(rng.uniform(50.0, 70.0)))

        def far_from_camera(lo, hi):
            px, _, pz = camera.position
            return (px < lo[0] - 0.4 or px > hi[0] + 0.4
                    or pz < lo[2] - 0.4 or pz > hi[2] + 0.4)

        def overlaps(lo, hi, placed):
            for b in placed:
                if (lo[0] < b.hi[0] + 0.05 and hi[0] > b.lo[0] - 0.05
                        and lo[2] < b.hi[2] + 0.05 and hi[2] > b.lo[2] - 0.05):
                    return True
            return False

        boxes: list[BoxSpec] = []
        n_boxes = int(rng.integers(1, 4))
        for _ in range(n_boxes):
            for _try in range(40):
                sx = float(rng.uniform(0.5, 1.3))
                sy = float(rng.uniform(0.4, 1.3))
                sz = float(rng.uniform(0.5, 1.3))
                x0 = float(rng.uniform(0.3, rx - 0.3 - sx))
                z0 = float(rng.uniform(0.3, rz - 0.3 - sz))
                lo = (x0, 0.0, z0)
                hi = (x0 + sx, sy, z0 + sz)
                if far_from_camera(lo, hi) and not overlaps(lo, hi, boxes):
                    boxes.append(BoxSpec(lo, hi, material(0.3, 0.15, 0.90)))
                    break

        return SceneSpec(seed=seed, room=(rx, ry, rz), wall_materials=walls,
                         boxes=tuple(boxes), light=light, camera=camera)


@dataclass(frozen=True)
class ScenePair:
    """Pixel-aligned buffers of one scene under both shading models.

    image_gl = albedo * shading_gl and image_pbr = albedo * shading_pbr by
    construction. mc_var holds the per-sample variance of the GI estimate
    and is not part of the on-disk pair.
    """

    albedo: ImageF
    normal: ImageF
    depth: ImageF
    shading_gl: ImageF
    shading_pbr: ImageF
    image_gl: ImageF
    image_pbr: ImageF
    mc_var: ImageF | None = field(default=None, compare=False)


def _camera_basis(camera: CameraSpec) -> np.ndarray:
    pos = np.asarray(camera.position, dtype=np.float64)
    look = np.asarray(camera.look_at, dtype=np.float64)
    fwd = look - pos
    n = np.linalg.norm(fwd)
    if n < 1e-9:
        raise ValueError("degenerate camera: look_at equals position")
    fwd /= n
    right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    rn = np.linalg.norm(right)
    if rn < 1e-6:
        raise ValueError("degenerate camera: view direction is vertical")
    right /= rn
    up = np.cross(right, fwd)
    tan_half = np.tan(np.deg2rad(camera.vfov_deg) / 2.0)
    return np.concatenate([pos, fwd, right, up, [tan_half]])


def _scene_arrays(spec: SceneSpec):
    room = np.asarray(spec.room, dtype=np.float64)
    nb = len(spec.boxes)
    boxes = np.zeros((nb, 6), dtype=np.float64)
    for i, b in enumerate(spec.boxes):
        boxes[i, :3] = b.lo
        boxes[i, 3:] = b.hi

    mats = list(spec.wall_materials) + [b.material for b in spec.boxes]
    mode = np.array([_MAT_MODES[m.mode] for m in mats], dtype=np.int32)
    ca = np.array([m.color_a for m in mats], dtype=np.float64)
    cb = np.array([m.color_b for m in mats], dtype=np.float64)
    scale = np.array([m.scale for m in mats], dtype=np.float64)

    li = spec.light
    light = np.array([*li.center, li.half_u, li.half_v, *li.radiance],
                     dtype=np.float64)
    return room, boxes, mode, ca, cb, scale, light


def render_pair(spec: SceneSpec, resolution: int = 64, spp: int = 1024,
                bounces: int = 3, ambient: float = 0.1) -> ScenePair:
    """Render one scene to a full buffer set.

    The flat shader uses a constant light intensity calibrated so a floor
    point directly under the emitter receives roughly the same direct value
    as under the GI shader: intensity = radiance * area / (pi * h^2) with h
    the emitter height.
    """
    if not 16 <= resolution <= 256:
        raise ValueError(f"resolution must be in [16, 256], got {resolution}")
    if spp < 1:
        raise ValueError("spp must be >= 1")
    if bounces < 1:
        raise ValueError("bounces must be >= 1")

    room, boxes, mode, ca, cb, scale, light = _scene_arrays(spec)
    cam = _camera_basis(spec.camera)

    h = spec.light.center[1]
    gl_scale = spec.light.area / (np.pi * h * h)
    gl = np.array([spec.light.radiance[0] * gl_scale,
                   spec.light.radiance[1] * gl_scale,
                   spec.light.radiance[2] * gl_scale,
                   ambient], dtype=np.float64)

    albedo, normal, depth, s_gl, s_pbr, var = render_kernel(
        room, boxes, mode, ca, cb, scale, light, cam, gl,
        resolution, resolution, spp, bounces, np.uint64(spec.seed))

    alb = ImageF(albedo)
    sgl = ImageF(s_gl)
    spb = ImageF(s_pbr)
    return ScenePair(
        albedo=alb,
        normal=ImageF(normal),
        depth=ImageF(depth),
        shading_gl=sgl,
        shading_pbr=spb,
        image_gl=ImageF(albedo * s_gl),
        image_pbr=ImageF(albedo * s_pbr),
        mc_var=ImageF(var),
    )


def save_pair(scene_dir: str | Path, pair: ScenePair) -> None:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    for name in PAIR_BUFFERS:
        write_cg2r(scene_dir / f"{name}.cg2r", getattr(pair, name))


def load_pair(scene_dir: str | Path) -> ScenePair:
    scene_dir = Path(scene_dir)
    bufs = {name: read_cg2r(scene_dir / f"{name}.cg2r") for name in PAIR_BUFFERS}
    return ScenePair(**bufs)


@dataclass(frozen=True)
class RealizeParams:
    """The hidden appearance transform of the real domain.

    Drawn deterministically from a seed; seed 0 is the exact identity.
    Applied as gamma -> saturation -> vignette -> channel gains -> noise,
    then clamped to >= 0. Gains come last so the pool's R/B ratio shift
    tracks gain_r/gain_b closely.
    """

    gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    gamma: float = 1.0
    saturation: float = 1.0
    vignette: float = 0.0
    noise_sigma: float = 0.0

    @staticmethod
    def from_seed(transform_seed: int) -> "RealizeParams":
        if transform_seed == 0:
            return RealizeParams()
        rng = np.random.default_rng(transform_seed)
        return RealizeParams(
            gains=(float(rng.uniform(1.05, 1.25)),
                   float(rng.uniform(0.97, 1.03)),
                   float(rng.uniform(0.80, 0.95))),
            gamma=float(rng.uniform(0.85, 1.15)),
            saturation=float(rng.uniform(0.9, 1.2)),
            vignette=float(rng.uniform(0.05, 0.15)),
            noise_sigma=float(rng.uniform(0.002, 0.01)),
        )


def realize(image: ImageF, transform_seed: int,
            noise_seed: int | None = None) -> ImageF:
    """Apply the hidden appearance transform drawn from transform_seed.

    The transform parameters depend only on transform_seed, so a whole pool
    realized with one seed shares a single consistent appearance; noise_seed
    decorrelates the sensor-noise pattern between images of the pool.
    Neutral stages are skipped, so the identity seed reproduces the input
    bit for bit.
    """
    params = RealizeParams.from_seed(transform_seed)
    if noise_seed is None:
        noise_seed = transform_seed
    return apply_realize_params(image, params, noise_seed)


def apply_realize_params(image: ImageF, p: RealizeParams,
                         noise_seed: int = 0) -> ImageF:
    x = image.data.astype(np.float32)

    if p.gamma != 1.0:
        x = np.power(x, np.float32(p.gamma))
    if p.saturation != 1.0:
        lum = x.mean(axis=2, keepdims=True)
        x = lum + np.float32(p.saturation) * (x - lum)
    if p.vignette != 0.0:
        h, w = x.shape[:2]
        yy = (np.arange(h, dtype=np.float32) + 0.5) / h * 2.0 - 1.0
        xx = (np.arange(w, dtype=np.float32) + 0.5) / w * 2.0 - 1.0
        r2 = (yy[:, None] ** 2 + xx[None, :] ** 2) / 2.0
        x = x * (1.0 - np.float32(p.vignette) * r2)[:, :, None]
    if p.gains != (1.0, 1.0, 1.0):
        x = x * np.asarray(p.gains, dtype=np.float32)
    if p.noise_sigma > 0.0:
        nrng = np.random.default_rng([noise_seed, 0xC62A])
        x = x + nrng.normal(0.0, p.noise_sigma, size=x.shape).astype(np.float32)
        x = np.maximum(x, 0.0)
    return ImageF(x)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    resolution: int
    spp: int
    bounces: int
    root_seed: int
    transform_seed: int
    splits: dict[str, tuple[int, int]]  # name -> (seed_start, count)

    def scene_seeds(self, split: str) -> list[int]:
        start, count = self.splits[split]
        return list(range(start, start + count))

    def scene_dirs(self, split: str) -> list[Path]:
        return [self.root / split / f"{seed:09d}"
                for seed in self.scene_seeds(split)]


def _manifest_path(root: str | Path) -> Path:
    return Path(root) / "manifest"


def write_manifest(m: DatasetManifest) -> None:
    lines = [
        "format = cg2real-dataset-v1",
        f"resolution = {m.resolution}",
        f"spp = {m.spp}",
        f"bounces = {m.bounces}",
        f"root_seed = {m.root_seed}",
        f"transform_seed = {m.transform_seed}",
        f"splits = {','.join(m.splits)}",
    ]
    for name, (start, count) in m.splits.items():
        lines.append(f"split.{name}.start = {start}")
        lines.append(f"split.{name}.count = {count}")
    _manifest_path(m.root).write_text("\n".join(lines) + "\n")


def read_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    kv: dict[str, str] = {}
    for line in _manifest_path(root).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    names = [s for s in kv["splits"].split(",") if s]
    splits = {name: (int(kv[f"split.{name}.start"]),
                     int(kv[f"split.{name}.count"])) for name in names}
    return DatasetManifest(
        root=root,
        resolution=int(kv["resolution"]),
        spp=int(kv["spp"]),
        bounces=int(kv["bounces"]),
        root_seed=int(kv["root_seed"]),
        transform_seed=int(kv["transform_seed"]),
        splits=splits,
    )


def default_workers() -> int:
    raw = os.environ.get("CG2REAL_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _generate_scene(args) -> None:
    (scene_dir, seed, resolution, spp, bounces, with_real,
     transform_seed) = args
    pair = render_pair(SceneSpec.sample(seed), resolution=resolution,
                       spp=spp, bounces=bounces)
    save_pair(scene_dir, pair)
    if with_real:
        img = realize(pair.image_pbr, transform_seed, noise_seed=seed)
        write_cg2r(Path(scene_dir) / f"{REAL_BUFFER}.cg2r", img)


def build_datasets(n_stage1: int, n_stage2: int, n_real: int, n_test: int,
                   root_seed: int, out_root: str | Path,
                   resolution: int = 64, spp: int = 1024, bounces: int = 3,
                   transform_seed: int | None = None,
                   workers: int | None = None) -> DatasetManifest:
    """Render four disjoint scene pools and write them under out_root.

    Splits: stage1 / stage2 / test hold fully paired buffers; real and test
    additionally hold the realized image. Scene seeds are consecutive
    integers partitioned across splits, so no scene can appear twice.
    """
    counts = {"stage1": n_stage1, "stage2": n_stage2,
              "real": n_real, "test": n_test}
    for name, n in counts.items():
        if n < 1:
            raise ValueError(f"split {name} needs at least 1 scene, got {n}")
    if transform_seed is None:
        transform_seed = root_seed * 1009 + 77
    if workers is None:
        workers = default_workers()

    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    base = root_seed * 1_000_000
    splits: dict[str, tuple[int, int]] = {}
    start = base
    for name in SPLITS:
        splits[name] = (start, counts[name])
        start += counts[name]

    manifest = DatasetManifest(root=out_root, resolution=resolution, spp=spp,
                               bounces=bounces, root_seed=root_seed,
                               transform_seed=transform_seed, splits=splits)

    jobs = []
    for name in SPLITS:
        with_real = name in ("real", "test")
        for seed, scene_dir in zip(manifest.scene_seeds(name),
                                   manifest.scene_dirs(name)):
            jobs.append((str(scene_dir), seed, resolution, spp, bounces,
                         with_real, transform_seed))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for _ in pool.map(_generate_scene, jobs, chunksize=4):
                pass
    else:
        for job in jobs:
            _generate_scene(job)

    write_manifest(manifest)
    return manifest
