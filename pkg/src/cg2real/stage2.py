"""Unpaired PBR-to-real translation with disentangled generators.

The forward path translates albedo and shading through separate generators
and composes the result; the backward path translates whole images back to
the PBR domain. Cycle consistency is asymmetric: the forward cycle maps the
translated image back with the backward generator, while the backward cycle
routes through a frozen intrinsic decomposition network so that the
disentangled generators are supervised on real inputs too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .datagen import ScenePair
from .imaging import ImageF, ShapeError
from .nets import (
    DecompNetSpec,
    DiscriminatorSpec,
    GeneratorSpec,
    build_decomp_net,
    build_discriminator,
    build_generator,
)
from .ops import (from_log_shading, full_precision, to_log_shading,
                  train_autocast)
from .stage1 import (
    _check_finite,
    _set_requires_grad,
    lr_factor,
    lsgan_d_loss,
    lsgan_g_loss,
    stage1_forward,
)


class LogSpaceGenerator(nn.Module):
    """Runs a generator in log space so nonnegative inputs stay nonnegative."""

    def __init__(self, net: nn.Module):
        super().__init__()
        self.net = net

    def forward(self, x):
        return from_log_shading(full_precision(self.net(to_log_shading(x))))


@dataclass(frozen=True)
class Stage2LossWeights:
    lambda_cyc: float = 10.0
    w_gan_real: float = 1.0
    w_gan_pbr: float = 1.0

    def __post_init__(self):
        for name in ("lambda_cyc", "w_gan_real", "w_gan_pbr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class Stage2Config:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-4
    seed: int = 0
    weights: Stage2LossWeights = field(default_factory=Stage2LossWeights)
    base_channels: int = 32
    n_res_blocks: int = 4
    pool_size: int = 50
    mixed_precision: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.pool_size < 0:
            raise ValueError("pool_size must be >= 0")


@dataclass
class Stage2Nets:
    gen_albedo: nn.Module
    gen_shading: nn.Module
    gen_backward: nn.Module
    disc_real: nn.Module
    disc_pbr: nn.Module


def build_stage2_nets(config: Stage2Config) -> Stage2Nets:
    b, r = config.base_channels, config.n_res_blocks
    gen_albedo = build_generator(
        GeneratorSpec("albedo_s2", base_channels=b, n_res_blocks=r,
                      n_downsample=0, final_activation="clamp01",
                      global_skip=True),
        seed=config.seed)
    gen_shading = LogSpaceGenerator(build_generator(
        GeneratorSpec("shading_s2", base_channels=b, n_res_blocks=r,
                      n_downsample=2, global_skip=True),
        seed=config.seed + 1))
    gen_backward = LogSpaceGenerator(build_generator(
        GeneratorSpec("image_r2p", base_channels=b, n_res_blocks=r,
                      n_downsample=2, global_skip=True),
        seed=config.seed + 2))
    disc_real = build_discriminator(DiscriminatorSpec(base_channels=b),
                                    seed=config.seed + 3)
    disc_pbr = build_discriminator(DiscriminatorSpec(base_channels=b),
                                   seed=config.seed + 4)
    return Stage2Nets(gen_albedo, gen_shading, gen_backward,
                      disc_real, disc_pbr)


def _check_aligned(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape[-2:]) + (t.shape[0],) for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(
            "misaligned inputs: " + ", ".join(str(tuple(t.shape))
                                              for t in tensors))


def forward_translate(gen_albedo: nn.Module, gen_shading: nn.Module,
                      albedo: torch.Tensor, shading: torch.Tensor):
    """Translate a PBR albedo/shading pair into the real domain.

    Returns (albedo_r, shading_r, image_r) with image_r composed as the
    literal product of the two translated layers.
    """
    _check_aligned(albedo, shading)
    albedo_r = full_precision(gen_albedo(albedo))
    shading_r = full_precision(gen_shading(shading))
    return albedo_r, shading_r, albedo_r * shading_r


def forward_cycle_loss(gen_backward: nn.Module, image_r: torch.Tensor,
                       image_p: torch.Tensor) -> torch.Tensor:
    """L1 between the back-translated image and the source PBR image."""
    _check_aligned(image_r, image_p)
    return (gen_backward(image_r) - image_p).abs().mean()


def backward_cycle_loss(gen_albedo: nn.Module, gen_shading: nn.Module,
                        gen_backward: nn.Module, decomp: nn.Module | None,
                        image_real: torch.Tensor) -> torch.Tensor:
    """Real -> PBR -> decompose -> translate layers -> recompose -> L1.

    Gradients flow through the decomposition network's function, but its
    parameters are never part of any optimizer.
    """
    if decomp is None:
        raise ValueError("backward cycle requires a pretrained "
                         "decomposition network")
    image_p = gen_backward(image_real)
    h_albedo, h_shading = decomp(image_p)
    recon = full_precision(gen_albedo(h_albedo)) * gen_shading(h_shading)
    return (recon - image_real).abs().mean()


def decomposition_loss(pred_albedo: torch.Tensor, pred_shading: torch.Tensor,
                       albedo: torch.Tensor,
                       shading: torch.Tensor) -> torch.Tensor:
    """Plain MSE on both layers, deliberately not scale-invariant."""
    return (torch.mean((pred_albedo - albedo) ** 2)
            + torch.mean((pred_shading - shading) ** 2))


@dataclass(frozen=True)
class DecompConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-4
    seed: int = 0
    encoder_depth: int = 3
    base_channels: int = 32
    mixed_precision: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class DecompResult:
    net: nn.Module
    history: list[dict]
    heldout_albedo_mse: float
    heldout_shading_mse: float
    heldout_recon_mae: float


DECOMP_CSV_FIELDS = ("epoch", "loss", "mse_albedo", "mse_shading")


def _decomp_tensors(triples) -> dict[str, torch.Tensor]:
    for t in triples:
        if len(t) != 3 or any(x is None for x in t):
            raise ValueError("decomposition training needs (image, albedo, "
                             "shading) triples with ground-truth layers")
    return {"image": torch.stack([t[0].to_tensor() for t in triples]),
            "albedo": torch.stack([t[1].to_tensor() for t in triples]),
            "shading": torch.stack([t[2].to_tensor() for t in triples])}


def pretrain_decomposition(triples, config: DecompConfig = DecompConfig(),
                           heldout=None) -> DecompResult:
    """Train the intrinsic decomposition network on refined PBR images.

    Each triple is (image, albedo, shading) with image = albedo * shading.
    Held-out metrics report per-head MSE plus the mean absolute error of
    the recomposed product.
    """
    if not triples:
        raise ValueError("empty decomposition training set")
    data = _decomp_tensors(triples)
    n = data["image"].shape[0]
    spec = DecompNetSpec(encoder_depth=config.encoder_depth,
                         base_channels=config.base_channels)
    net = build_decomp_net(spec, seed=config.seed)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr, betas=(0.5, 0.999))
    rng = np.random.default_rng([config.seed, 0xDEC0])
    batch = min(config.batch_size, n)
    steps = max(1, n // batch)

    history = []
    for epoch in range(1, config.epochs + 1):
        factor = lr_factor(epoch, config.epochs)
        for group in opt.param_groups:
            group["lr"] = config.lr * factor
        perm = rng.permutation(n)
        sums = {"loss": 0.0, "mse_albedo": 0.0, "mse_shading": 0.0}
        for step in range(steps):
            idx = perm[step * batch:(step + 1) * batch]
            image = data["image"][idx]
            with train_autocast(config.mixed_precision):
                pred_a, pred_s = net(image)
                mse_a = torch.mean((pred_a - data["albedo"][idx]) ** 2)
                mse_s = torch.mean((pred_s - data["shading"][idx]) ** 2)
                loss = mse_a + mse_s
            opt.zero_grad()
            loss.backward()
            opt.step()
            _check_finite(epoch, step, loss=loss, mse_albedo=mse_a,
                          mse_shading=mse_s)
            sums["loss"] += float(loss.detach())
            sums["mse_albedo"] += float(mse_a.detach())
            sums["mse_shading"] += float(mse_s.detach())
        row = {"epoch": epoch, "lr": config.lr * factor}
        row.update({k: v / steps for k, v in sums.items()})
        history.append(row)

    mse_a = mse_s = mae = float("nan")
    if heldout:
        held = _decomp_tensors(heldout)
        net.eval()
        with torch.no_grad():
            pred_a, pred_s = net(held["image"])
            mse_a = float(torch.mean((pred_a - held["albedo"]) ** 2))
            mse_s = float(torch.mean((pred_s - held["shading"]) ** 2))
            mae = float((pred_a * pred_s - held["image"]).abs().mean())
    return DecompResult(net, history, mse_a, mse_s, mae)


@dataclass(frozen=True)
class TranslationSet:
    """Stacked stage-2 inputs: ground-truth albedo plus a shading/image pair.

    When built from a trained refinement generator the shading and image are
    the refined predictions; without one they fall back to the rendered PBR
    buffers.
    """

    albedo: torch.Tensor
    shading: torch.Tensor
    image: torch.Tensor

    def __post_init__(self):
        _check_aligned(self.albedo, self.shading, self.image)

    def __len__(self) -> int:
        return self.albedo.shape[0]

    @staticmethod
    def from_pairs(pairs: list[ScenePair], stage1_generator: nn.Module | None = None,
                   batch_size: int = 8) -> "TranslationSet":
        if not pairs:
            raise ValueError("need at least one scene pair")
        albedo = torch.stack([p.albedo.to_tensor() for p in pairs])
        if stage1_generator is None:
            shading = torch.stack([p.shading_pbr.to_tensor() for p in pairs])
            return TranslationSet(albedo, shading, albedo * shading)
        s_o = torch.stack([p.shading_gl.to_tensor() for p in pairs])
        normal = torch.stack([p.normal.to_tensor() for p in pairs])
        stage1_generator.eval()
        chunks = []
        with torch.no_grad():
            for i in range(0, len(pairs), batch_size):
                sl = slice(i, i + batch_size)
                s_bar, _ = stage1_forward(stage1_generator, s_o[sl],
                                          albedo[sl], normal[sl])
                chunks.append(s_bar)
        shading = torch.cat(chunks)
        return TranslationSet(albedo, shading, albedo * shading)


def decomp_triples_from_pairs(pairs: list[ScenePair],
                              stage1_generator: nn.Module | None = None,
                              batch_size: int = 8):
    """Build (image, albedo, shading) training triples for decomposition.

    With a refinement generator the image and shading are its predictions;
    otherwise the rendered PBR buffers are used directly.
    """
    ts = TranslationSet.from_pairs(pairs, stage1_generator, batch_size)
    return [(ImageF.from_tensor(ts.image[i]), ImageF.from_tensor(ts.albedo[i]),
             ImageF.from_tensor(ts.shading[i])) for i in range(len(ts))]


def real_images_tensor(images) -> torch.Tensor:
    """Stack a list of ImageF real photos into an (N, 3, H, W) tensor."""
    if not images:
        raise ValueError("need at least one real image")
    return torch.stack([img.to_tensor() for img in images])


class ImagePool:
    """Replay buffer of past generator outputs for discriminator updates."""

    def __init__(self, size: int = 50, seed: int = 0):
        self.size = size
        self.images: list[torch.Tensor] = []
        self.rng = np.random.default_rng([seed, 0x5EED])

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        batch = batch.detach()
        if self.size == 0:
            return batch
        out = []
        for img in batch:
            if len(self.images) < self.size:
                self.images.append(img.clone())
                out.append(img)
            elif self.rng.random() < 0.5:
                j = int(self.rng.integers(len(self.images)))
                out.append(self.images[j])
                self.images[j] = img.clone()
            else:
                out.append(img)
        return torch.stack(out)


@dataclass
class Stage2Result:
    nets: Stage2Nets
    history: list[dict]


STAGE2_CSV_FIELDS = ("epoch", "g_total", "g_gan_real", "g_gan_pbr",
                     "cyc_fwd", "cyc_bwd", "d_real", "d_pbr")


def train_stage2(pbr: TranslationSet, real_images: torch.Tensor,
                 decomp: nn.Module | None,
                 config: Stage2Config = Stage2Config()) -> Stage2Result:
    """Adversarial training of the disentangled translation generators.

    The decomposition network must be pretrained; it is frozen here and
    only its function participates in the backward cycle.
    """
    if decomp is None:
        raise ValueError("train_stage2 requires a pretrained decomposition "
                         "network")
    if len(pbr) == 0 or real_images.shape[0] == 0:
        raise ValueError("both dataset streams must be non-empty")
    decomp.eval()
    _set_requires_grad(decomp, False)

    nets = build_stage2_nets(config)
    w = config.weights
    gen_params = (list(nets.gen_albedo.parameters())
                  + list(nets.gen_shading.parameters())
                  + list(nets.gen_backward.parameters()))
    opt_g = torch.optim.Adam(gen_params, lr=config.lr, betas=(0.5, 0.999))
    opt_dr = torch.optim.Adam(nets.disc_real.parameters(), lr=config.lr,
                              betas=(0.5, 0.999))
    opt_dp = torch.optim.Adam(nets.disc_pbr.parameters(), lr=config.lr,
                              betas=(0.5, 0.999))

    pool_real = ImagePool(config.pool_size, seed=config.seed)
    pool_pbr = ImagePool(config.pool_size, seed=config.seed + 1)
    rng = np.random.default_rng([config.seed, 0x57A2])
    n_p, n_r = len(pbr), real_images.shape[0]
    batch = min(config.batch_size, n_p, n_r)
    steps = max(1, min(n_p, n_r) // batch)

    history = []
    for epoch in range(1, config.epochs + 1):
        factor = lr_factor(epoch, config.epochs)
        for opt in (opt_g, opt_dr, opt_dp):
            for group in opt.param_groups:
                group["lr"] = config.lr * factor
        perm_p = rng.permutation(n_p)
        perm_r = rng.permutation(n_r)
        sums = dict.fromkeys(STAGE2_CSV_FIELDS[1:], 0.0)
        for step in range(steps):
            ip = perm_p[step * batch:(step + 1) * batch]
            ir = perm_r[step * batch:(step + 1) * batch]
            a_p = pbr.albedo[ip]
            s_p = pbr.shading[ip]
            i_p = pbr.image[ip]
            i_real = real_images[ir]

            _set_requires_grad(nets.disc_real, False)
            _set_requires_grad(nets.disc_pbr, False)
            autocast = train_autocast(config.mixed_precision)
            with autocast:
                a_r, s_r, i_r = forward_translate(nets.gen_albedo,
                                                  nets.gen_shading, a_p, s_p)
                i_p_fake = nets.gen_backward(i_real)
                h_albedo, h_shading = decomp(i_p_fake)
                recon_real = (full_precision(nets.gen_albedo(h_albedo))
                              * nets.gen_shading(h_shading))

                g_gan_real = lsgan_g_loss(nets.disc_real, i_r)
                g_gan_pbr = lsgan_g_loss(nets.disc_pbr, i_p_fake)
                cyc_fwd = forward_cycle_loss(nets.gen_backward, i_r, i_p)
                cyc_bwd = (recon_real - i_real).abs().mean()
                g_total = (w.w_gan_real * g_gan_real + w.w_gan_pbr * g_gan_pbr
                           + w.lambda_cyc * (cyc_fwd + cyc_bwd))
            opt_g.zero_grad()
            g_total.backward()
            opt_g.step()

            _set_requires_grad(nets.disc_real, True)
            _set_requires_grad(nets.disc_pbr, True)
            with autocast:
                d_real = lsgan_d_loss(nets.disc_real, i_real,
                                      pool_real.query(i_r))
            opt_dr.zero_grad()
            d_real.backward()
            opt_dr.step()
            with autocast:
                d_pbr = lsgan_d_loss(nets.disc_pbr, i_p,
                                     pool_pbr.query(i_p_fake))
            opt_dp.zero_grad()
            d_pbr.backward()
            opt_dp.step()

            _check_finite(epoch, step, g_total=g_total, g_gan_real=g_gan_real,
                          g_gan_pbr=g_gan_pbr, cyc_fwd=cyc_fwd,
                          cyc_bwd=cyc_bwd, d_real=d_real, d_pbr=d_pbr)
            for key, value in (("g_total", g_total), ("g_gan_real", g_gan_real),
                               ("g_gan_pbr", g_gan_pbr), ("cyc_fwd", cyc_fwd),
                               ("cyc_bwd", cyc_bwd), ("d_real", d_real),
                               ("d_pbr", d_pbr)):
                sums[key] += float(value.detach())

        row = {"epoch": epoch, "lr": config.lr * factor}
        row.update({k: v / steps for k, v in sums.items()})
        history.append(row)

    return Stage2Result(nets, history)


def translate_stage2(nets: Stage2Nets, pbr: TranslationSet,
                     batch_size: int = 8) -> dict[str, torch.Tensor]:
    """Run the trained forward generators over a whole set.

    Returns stacked albedo / shading / image tensors for the real domain.
    """
    nets.gen_albedo.eval()
    nets.gen_shading.eval()
    outs: dict[str, list[torch.Tensor]] = {"albedo": [], "shading": [],
                                           "image": []}
    with torch.no_grad():
        for i in range(0, len(pbr), batch_size):
            sl = slice(i, i + batch_size)
            a_r, s_r, i_r = forward_translate(nets.gen_albedo,
                                              nets.gen_shading,
                                              pbr.albedo[sl], pbr.shading[sl])
            outs["albedo"].append(a_r)
            outs["shading"].append(s_r)
            outs["image"].append(i_r)
    return {k: torch.cat(v) for k, v in outs.items()}
