"""Network specs and constructors: generators, patch discriminators, and the
two-headed intrinsic decomposition net.

Specs are small frozen dataclasses that validate their own invariants and
serialize into checkpoints next to the weights, so a checkpoint is
self-describing. All parameter initialization is seeded and deterministic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .ops import GuidedFilterParams, full_precision, guided_filter

GENERATOR_KINDS = ("shading_s1", "albedo_s2", "shading_s2", "image_r2p")
FINAL_ACTIVATIONS = ("none", "tanh_log", "sigmoid", "clamp01")

# (kernel, stride) schedules; both end in a stride-1 score head
DISC_SCHEDULES = {
    "desk": ((4, 2), (4, 2), (3, 2), (3, 1)),
    "full": ((4, 2), (4, 2), (4, 2), (4, 1), (4, 1)),
}


def conv_chain_receptive_field(schedule) -> int:
    """Receptive field of a chain of (kernel, stride) convolutions."""
    rf = 1
    jump = 1
    for k, s in schedule:
        rf += (k - 1) * jump
        jump *= s
    return rf


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    base_channels: int = 32
    n_res_blocks: int = 4
    n_downsample: int = 2
    in_channels: int = 3
    out_channels: int = 3
    final_activation: str = "none"
    global_skip: bool = False

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.final_activation not in FINAL_ACTIVATIONS:
            raise ValueError(f"unknown final activation {self.final_activation!r}")
        if min(self.base_channels, self.in_channels, self.out_channels) < 1:
            raise ValueError("channel counts must be positive")
        if self.n_res_blocks < 1:
            raise ValueError("need at least one residual block")
        if self.global_skip and self.in_channels != self.out_channels:
            raise ValueError("a global skip needs matching channel counts")
        if self.global_skip and self.final_activation in ("tanh_log", "sigmoid"):
            raise ValueError("a global skip only composes with none/clamp01")
        if self.kind == "albedo_s2" and self.n_downsample != 0:
            raise ValueError("the albedo generator must stay at full resolution")
        if self.kind in ("shading_s2", "image_r2p") and self.n_downsample != 2:
            raise ValueError(f"{self.kind} uses exactly 2 downsample steps")
        if self.n_downsample < 0:
            raise ValueError("n_downsample must be >= 0")

    @staticmethod
    def default(kind: str) -> "GeneratorSpec":
        if kind == "shading_s1":
            # input stack: log shading + albedo + normals
            return GeneratorSpec(kind, base_channels=32, n_res_blocks=6,
                                 n_downsample=2, in_channels=9)
        if kind == "albedo_s2":
            return GeneratorSpec(kind, base_channels=32, n_res_blocks=4,
                                 n_downsample=0, final_activation="clamp01",
                                 global_skip=True)
        if kind in ("shading_s2", "image_r2p"):
            return GeneratorSpec(kind, base_channels=32, n_res_blocks=4,
                                 n_downsample=2, global_skip=True)
        raise ValueError(f"unknown generator kind {kind!r}")

    @property
    def n_convs(self) -> int:
        """Convolution count along the main path (stem + blocks + head)."""
        return 2 + 2 * self.n_res_blocks + 2 * self.n_downsample

    def receptive_field(self) -> int:
        """Analytic receptive field in input pixels.

        Exact for stride-1 generators; an upper bound through the
        down/upsampling path otherwise.
        """
        rf = 1
        jump = 1
        rf += 2 * jump  # stem 3x3
        for _ in range(self.n_downsample):
            rf += 2 * jump
            jump *= 2
        rf += 2 * jump * 2 * self.n_res_blocks
        for _ in range(self.n_downsample):
            jump //= 2
            rf += 2 * jump
        rf += 2 * jump  # head 3x3
        return rf


@dataclass(frozen=True)
class DiscriminatorSpec:
    """PatchGAN discriminator over (scored tensor + conditioning) channels."""

    in_channels: int = 3
    base_channels: int = 32
    preset: str = "desk"  # desk: RF 34, map stride 8; full: RF 70
    norm: str = "instance"  # instance | none

    def __post_init__(self):
        if self.preset not in DISC_SCHEDULES:
            raise ValueError(f"unknown discriminator preset {self.preset!r}")
        if self.norm not in ("instance", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if min(self.in_channels, self.base_channels) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def schedule(self):
        return DISC_SCHEDULES[self.preset]

    def receptive_field(self) -> int:
        return conv_chain_receptive_field(self.schedule)

    def total_stride(self) -> int:
        s = 1
        for _, stride in self.schedule:
            s *= stride
        return s


@dataclass(frozen=True)
class DecompNetSpec:
    """One shared encoder, two skip-connected decoders (albedo, shading)."""

    encoder_depth: int = 3
    base_channels: int = 32
    in_channels: int = 3
    skip_connections: bool = True

    def __post_init__(self):
        if not self.skip_connections:
            raise ValueError("the decomposition decoders require skip connections")
        if self.encoder_depth < 1:
            raise ValueError("encoder depth must be >= 1")
        if min(self.base_channels, self.in_channels) < 1:
            raise ValueError("channel counts must be positive")


def init_weights(module: nn.Module, std: float = 0.02, seed: int = 0) -> nn.Module:
    """Deterministic init: conv weights ~ N(0, std), biases zero."""
    gen = torch.Generator().manual_seed(seed)
    for _, m in sorted(module.named_modules(), key=lambda kv: kv[0]):
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
    return module


def _norm(channels, kind="instance"):
    if kind == "instance":
        return nn.InstanceNorm2d(channels)
    return nn.Identity()


class ResBlock(nn.Module):
    def __init__(self, channels, use_norm=True):
        super().__init__()
        kind = "instance" if use_norm else "none"
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            _norm(channels, kind),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            _norm(channels, kind),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """Stem, optional strided downsamples, residual blocks, nearest-neighbor
    upsamples, head. No normalization anywhere when use_norm is off (the
    local albedo generator must not see global statistics). With a global
    skip the network parameterizes an edit on top of the identity, so a
    freshly initialized generator reproduces its input almost exactly."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        use_norm = spec.n_downsample > 0
        kind = "instance" if use_norm else "none"
        ch = spec.base_channels
        layers = [nn.Conv2d(spec.in_channels, ch, 3, padding=1),
                  _norm(ch, kind), nn.ReLU(inplace=True)]
        for _ in range(spec.n_downsample):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                       _norm(ch * 2, kind), nn.ReLU(inplace=True)]
            ch *= 2
        for _ in range(spec.n_res_blocks):
            layers.append(ResBlock(ch, use_norm=use_norm))
        for _ in range(spec.n_downsample):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(ch, ch // 2, 3, padding=1),
                       _norm(ch // 2, kind), nn.ReLU(inplace=True)]
            ch //= 2
        layers.append(nn.Conv2d(ch, spec.out_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        h, w = x.shape[-2], x.shape[-1]
        div = 2 ** self.spec.n_downsample
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} not divisible by {div}")
        out = self.net(x)
        if self.spec.global_skip:
            out = out + x
        act = self.spec.final_activation
        if act == "tanh_log":
            return torch.tanh(out)
        if act == "sigmoid":
            return torch.sigmoid(out)
        if act == "clamp01":
            return out.clamp(0.0, 1.0)
        return out


class GuidedShadingGenerator(nn.Module):
    """Refinement-stage shading generator with a guided filter on its output.

    The input stack is (log shading, albedo, normals); the raw network
    output is filtered in log space using the input log shading as the
    guide, which keeps the prediction aligned with input edges.
    """

    def __init__(self, spec: GeneratorSpec,
                 filter_params: GuidedFilterParams | None = None):
        super().__init__()
        self.spec = spec
        self.net = ResnetGenerator(spec)
        self.filter_params = filter_params or GuidedFilterParams()

    def forward(self, x):
        raw = self.net(x)
        guide = x[:, :raw.shape[1]]
        return guided_filter(guide, raw, self.filter_params)


def build_generator(spec: GeneratorSpec,
                    filter_params: GuidedFilterParams | None = None,
                    seed: int = 0) -> nn.Module:
    if spec.kind == "shading_s1":
        net = GuidedShadingGenerator(spec, filter_params)
    else:
        net = ResnetGenerator(spec)
    return init_weights(net, seed=seed)


class PatchDiscriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers = []
        ch_in = spec.in_channels
        ch = spec.base_channels
        schedule = spec.schedule
        for i, (k, s) in enumerate(schedule[:-1]):
            layers.append(nn.Conv2d(ch_in, ch, k, stride=s, padding=(k - 1) // 2))
            if i > 0 and spec.norm == "instance":
                layers.append(nn.InstanceNorm2d(ch))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            ch_in = ch
            ch = min(ch * 2, 8 * spec.base_channels)
        k, s = schedule[-1]
        layers.append(nn.Conv2d(ch_in, 1, k, stride=s, padding=(k - 1) // 2))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if min(x.shape[-2], x.shape[-1]) < self.spec.total_stride():
            raise ValueError(f"input {x.shape[-2]}x{x.shape[-1]} smaller than "
                             f"one patch stride {self.spec.total_stride()}")
        return self.net(x)


def build_discriminator(spec: DiscriminatorSpec, seed: int = 0) -> nn.Module:
    return init_weights(PatchDiscriminator(spec), seed=seed)


class _UNetEncoder(nn.Module):
    def __init__(self, in_channels, base, depth):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, base, 3, padding=1),
                                  nn.ReLU(inplace=True))
        downs = []
        ch = base
        for _ in range(depth):
            ch_out = min(ch * 2, 256)
            downs.append(nn.Sequential(
                nn.Conv2d(ch, ch_out, 3, stride=2, padding=1),
                nn.InstanceNorm2d(ch_out),
                nn.ReLU(inplace=True)))
            ch = ch_out
        self.downs = nn.ModuleList(downs)
        self.out_channels = ch

    def forward(self, x):
        feats = [self.stem(x)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        return feats  # [full res, /2, ..., /2^depth]


class _UNetDecoder(nn.Module):
    def __init__(self, enc_channels, out_channels, final_activation="none"):
        super().__init__()
        ups = []
        fuses = []
        chs = list(enc_channels)  # channels of encoder features, coarse last
        ch = chs[-1]
        for skip_ch in reversed(chs[:-1]):
            ups.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, skip_ch, 3, padding=1),
                nn.InstanceNorm2d(skip_ch),
                nn.ReLU(inplace=True)))
            fuses.append(nn.Sequential(
                nn.Conv2d(skip_ch * 2, skip_ch, 3, padding=1),
                nn.InstanceNorm2d(skip_ch),
                nn.ReLU(inplace=True)))
            ch = skip_ch
        self.ups = nn.ModuleList(ups)
        self.fuses = nn.ModuleList(fuses)
        self.head = nn.Conv2d(ch, out_channels, 3, padding=1)
        if final_activation == "sigmoid":
            self.act = nn.Sigmoid()
        elif final_activation == "none":
            self.act = nn.Identity()
        else:
            raise ValueError(f"unknown decoder activation {final_activation!r}")

    def forward(self, feats):
        x = feats[-1]
        for up, fuse, skip in zip(self.ups, self.fuses, reversed(feats[:-1])):
            x = up(x)
            x = fuse(torch.cat([x, skip], dim=1))
        return self.act(self.head(x))


class DecompNet(nn.Module):
    """Intrinsic decomposition: shared encoder, albedo and shading decoders.

    The albedo head is sigmoid-bounded to [0,1]; the shading head predicts
    log shading and is mapped through exp so the output is nonnegative.
    """

    LOG_EPS = 1e-4

    def __init__(self, spec: DecompNetSpec):
        super().__init__()
        self.spec = spec
        self.encoder = _UNetEncoder(spec.in_channels, spec.base_channels,
                                    spec.encoder_depth)
        chs = [spec.base_channels]
        ch = spec.base_channels
        for _ in range(spec.encoder_depth):
            ch = min(ch * 2, 256)
            chs.append(ch)
        self.albedo_head = _UNetDecoder(chs, 3, final_activation="sigmoid")
        self.shading_head = _UNetDecoder(chs, 3, final_activation="none")

    def forward(self, x):
        h, w = x.shape[-2], x.shape[-1]
        div = 2 ** self.spec.encoder_depth
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} not divisible by {div}")
        feats = self.encoder(x)
        albedo = full_precision(self.albedo_head(feats))
        log_s = full_precision(self.shading_head(feats))
        shading = torch.clamp(torch.exp(log_s) - self.LOG_EPS, min=0.0)
        return albedo, shading


def build_decomp_net(spec: DecompNetSpec, seed: int = 0) -> nn.Module:
    return init_weights(DecompNet(spec), seed=seed)


class TaskUNet(nn.Module):
    """Single-decoder U-Net for dense prediction (normals, depth)."""

    def __init__(self, in_channels=3, out_channels=3, base=32, depth=4):
        super().__init__()
        self.depth = depth
        self.encoder = _UNetEncoder(in_channels, base, depth)
        chs = [base]
        ch = base
        for _ in range(depth):
            ch = min(ch * 2, 256)
            chs.append(ch)
        self.decoder = _UNetDecoder(chs, out_channels, final_activation="none")

    def forward(self, x):
        h, w = x.shape[-2], x.shape[-1]
        div = 2 ** self.depth
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} not divisible by {div}")
        return self.decoder(self.encoder(x))


def build_task_net(in_channels=3, out_channels=3, base=32, depth=4,
                   seed: int = 0) -> nn.Module:
    return init_weights(TaskUNet(in_channels, out_channels, base, depth),
                        seed=seed)


def receptive_field_probe(net: nn.Module, image: torch.Tensor,
                          pixel: tuple[int, int], delta: float = 0.1,
                          threshold: float = 1e-7) -> np.ndarray:
    """Mask of output pixels affected by perturbing one input pixel.

    Adds delta to every channel of the pixel and thresholds the absolute
    output change. The mask of a stride-1 local generator must fit inside
    its analytic receptive-field window.
    """
    y, x = pixel
    if image.ndim == 3:
        image = image[None]
    with torch.no_grad():
        base = net(image)
        bumped = image.clone()
        bumped[:, :, y, x] += delta
        out = net(bumped)
    diff = (out - base).abs().amax(dim=(0, 1))
    return (diff > threshold).numpy()


# --- checkpoint container -------------------------------------------------

_CKPT_VERSION = 1
_TENSOR_MAGIC = b"CG2R"

_SPEC_TYPES = {
    "generator": GeneratorSpec,
    "discriminator": DiscriminatorSpec,
    "decomp": DecompNetSpec,
}


def save_checkpoint(path: str | Path, module: nn.Module, meta: dict) -> None:
    """Single-file checkpoint: version byte, JSON meta, then named float32
    tensor blocks (u32 name length + name, magic, u32 ndim, dims, payload)."""
    blob = bytearray()
    blob.append(_CKPT_VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    state = module.state_dict()
    blob += struct.pack("<I", len(state))
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        name_b = name.encode()
        blob += struct.pack("<I", len(name_b))
        blob += name_b
        blob += _TENSOR_MAGIC
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (1,)))
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Returns (meta, state_dict of torch tensors)."""
    raw = Path(path).read_bytes()
    if not raw or raw[0] != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    off = 1
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off:off + meta_len].decode())
    off += meta_len
    (n_tensors,) = struct.unpack_from("<I", raw, off)
    off += 4
    state = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + name_len].decode()
        off += name_len
        if raw[off:off + 4] != _TENSOR_MAGIC:
            raise ValueError(f"{path}: corrupt tensor block for {name!r}")
        off += 4
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{max(ndim, 1)}I", raw, off)
        off += 4 * max(ndim, 1)
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).copy()
        off += 4 * count
        state[name] = torch.from_numpy(arr.reshape(dims[:ndim] if ndim else ()))
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return meta, state


def save_net(path: str | Path, module: nn.Module, kind: str, spec) -> None:
    meta = {"type": kind, "spec": asdict(spec)}
    if isinstance(module, GuidedShadingGenerator):
        meta["filter"] = asdict(module.filter_params)
    save_checkpoint(path, module, meta)


def load_net(path: str | Path) -> nn.Module:
    """Rebuild a network from a checkpoint written by save_net."""
    meta, state = load_checkpoint(path)
    kind = meta["type"]
    spec_cls = _SPEC_TYPES[kind]
    spec_kwargs = dict(meta["spec"])
    for key in ("schedule",):
        spec_kwargs.pop(key, None)
    spec = spec_cls(**{k: tuple(v) if isinstance(v, list) else v
                       for k, v in spec_kwargs.items()})
    if kind == "generator":
        filter_params = None
        if "filter" in meta:
            filter_params = GuidedFilterParams(**meta["filter"])
        net = build_generator(spec, filter_params)
    elif kind == "discriminator":
        net = build_discriminator(spec)
    else:
        net = build_decomp_net(spec)
    net.load_state_dict(state)
    return net
