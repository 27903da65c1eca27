"""Supervised shading refinement: flat direct-lighting shading to
global-illumination shading.

The generator sees (log shading, albedo, normals), predicts log shading,
and its output is guided-filtered against the input before leaving log
space. The refined image is always the literal product of the input albedo
and the refined shading. Training combines a perceptual reconstruction loss
on the image with least-squares adversarial losses on the image and on the
shading, both discriminators conditioned on albedo and normals.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .datagen import ScenePair
from .features import FeatureExtractor, default_feature_extractor
from .imaging import ShapeError
from .nets import (DiscriminatorSpec, GeneratorSpec, build_discriminator,
                   build_generator)
from .ops import (GuidedFilterParams, from_log_shading, full_precision,
                  to_log_shading, train_autocast)


def stage1_forward(generator: nn.Module, s_o: torch.Tensor, a_o: torch.Tensor,
                   n_o: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Refine flat shading; returns (refined shading, refined image).

    The image is the elementwise product of the input albedo and the
    refined shading, by construction.
    """
    if not s_o.shape == a_o.shape == n_o.shape:
        raise ShapeError(f"stage-1 buffers disagree: {tuple(s_o.shape)} "
                         f"{tuple(a_o.shape)} {tuple(n_o.shape)}")
    x = torch.cat([to_log_shading(s_o), a_o, n_o], dim=1)
    s_log = generator(x)
    s_bar = from_log_shading(s_log)
    return s_bar, a_o * s_bar


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor,
                    extractor: FeatureExtractor | None = None) -> torch.Tensor:
    """Pixel L1 plus mean-abs differences of fixed random conv features."""
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {tuple(pred.shape)} vs "
                         f"{tuple(target.shape)}")
    if extractor is None:
        extractor = default_feature_extractor(in_channels=pred.shape[1])
    loss = (pred - target).abs().mean()
    for fp, ft in zip(extractor.features(pred), extractor.features(target)):
        loss = loss + (full_precision(fp) - full_precision(ft)).abs().mean()
    return loss


def lsgan_d_loss(disc: nn.Module, real: torch.Tensor,
                 fake: torch.Tensor) -> torch.Tensor:
    """Least-squares discriminator loss; fake detached from its graph."""
    return (0.5 * ((full_precision(disc(real)) - 1.0) ** 2).mean()
            + 0.5 * (full_precision(disc(fake.detach())) ** 2).mean())


def lsgan_g_loss(disc: nn.Module, fake: torch.Tensor) -> torch.Tensor:
    """Least-squares generator loss."""
    return 0.5 * ((full_precision(disc(fake)) - 1.0) ** 2).mean()


def gan_losses(disc: nn.Module, real: torch.Tensor,
               fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN losses: (generator loss, discriminator loss).

    The discriminator loss sees the fake detached from the generator graph.
    """
    return lsgan_g_loss(disc, fake), lsgan_d_loss(disc, real, fake)


@dataclass(frozen=True)
class Stage1LossWeights:
    w_perceptual: float = 10.0
    w_gan_image: float = 1.0
    w_gan_shading: float = 1.0

    def __post_init__(self):
        if min(self.w_perceptual, self.w_gan_image, self.w_gan_shading) < 0:
            raise ValueError("loss weights must be nonnegative")
        if max(self.w_perceptual, self.w_gan_image, self.w_gan_shading) == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class Stage1Config:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-4
    seed: int = 0
    weights: Stage1LossWeights = field(default_factory=Stage1LossWeights)
    filter_params: GuidedFilterParams = field(default_factory=GuidedFilterParams)
    base_channels: int = 32
    n_res_blocks: int = 6
    mixed_precision: bool = True


@dataclass
class Stage1Result:
    generator: nn.Module
    disc_image: nn.Module
    disc_shading: nn.Module
    history: list[dict]
    identity_l1: float
    flags: tuple[str, ...] = ()


CSV_FIELDS = ("epoch", "g_loss", "d_img", "d_shd", "perc", "heldout_L1")


def history_csv(history: list[dict], fields: tuple[str, ...] = CSV_FIELDS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: row[k] for k in fields})
    return buf.getvalue()


def lr_factor(epoch: int, total_epochs: int) -> float:
    """Constant for the first half, then linear decay to zero (1-indexed)."""
    return min(1.0, 2.0 * (total_epochs - epoch) / total_epochs)


def pairs_to_tensors(pairs: list[ScenePair]) -> dict[str, torch.Tensor]:
    def stack(name):
        return torch.stack([getattr(p, name).to_tensor() for p in pairs])

    return {"s_o": stack("shading_gl"), "a": stack("albedo"),
            "n": stack("normal"), "s_p": stack("shading_pbr"),
            "i_p": stack("image_pbr")}


def _check_finite(epoch: int, step: int, **losses: torch.Tensor) -> None:
    values = {k: float(v.detach()) for k, v in losses.items()}
    for name, value in values.items():
        if not np.isfinite(value):
            raise RuntimeError(
                f"non-finite loss at epoch {epoch} step {step}: {name} = "
                f"{value} (all: "
                + ", ".join(f"{k}={v:.4g}" for k, v in values.items())
                + ")")


def _set_requires_grad(net: nn.Module, flag: bool) -> None:
    for p in net.parameters():
        p.requires_grad_(flag)


def train_stage1(pairs: list[ScenePair], config: Stage1Config,
                 heldout: list[ScenePair] | None = None) -> Stage1Result:
    """Train the shading refinement stage; deterministic given config.seed."""
    if not pairs:
        raise ValueError("training set is empty")
    heldout = heldout or []

    w = config.weights
    flags = () if w.w_gan_shading > 0 else ("no_shading_gan",)

    gen_spec = GeneratorSpec("shading_s1", base_channels=config.base_channels,
                             n_res_blocks=config.n_res_blocks, n_downsample=2,
                             in_channels=9)
    gen = build_generator(gen_spec, config.filter_params, seed=config.seed)
    disc_spec = DiscriminatorSpec(in_channels=9)
    d_img = build_discriminator(disc_spec, seed=config.seed + 1)
    d_shd = build_discriminator(disc_spec, seed=config.seed + 2)
    extractor = default_feature_extractor(in_channels=3)

    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr, betas=(0.5, 0.999))
    opt_di = torch.optim.Adam(d_img.parameters(), lr=config.lr, betas=(0.5, 0.999))
    opt_ds = torch.optim.Adam(d_shd.parameters(), lr=config.lr, betas=(0.5, 0.999))

    data = pairs_to_tensors(pairs)
    held = pairs_to_tensors(heldout) if heldout else None
    n = data["s_o"].shape[0]
    rng = np.random.default_rng(config.seed)

    identity_l1 = float((data["s_o"] - data["s_p"]).abs().mean())

    def heldout_l1() -> float:
        if held is None:
            return float("nan")
        gen.eval()
        with torch.no_grad():
            s_bar, _ = stage1_forward(gen, held["s_o"], held["a"], held["n"])
            err = float((s_bar - held["s_p"]).abs().mean())
        gen.train()
        return err

    history: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        factor = lr_factor(epoch, config.epochs)
        for opt in (opt_g, opt_di, opt_ds):
            for group in opt.param_groups:
                group["lr"] = config.lr * factor

        order = rng.permutation(n)
        sums = {"g_loss": 0.0, "d_img": 0.0, "d_shd": 0.0, "perc": 0.0}
        n_batches = 0
        for step, lo in enumerate(range(0, n, config.batch_size)):
            idx = torch.from_numpy(order[lo:lo + config.batch_size])
            s_o = data["s_o"][idx]
            a = data["a"][idx]
            n_b = data["n"][idx]
            s_p = data["s_p"][idx]
            i_p = data["i_p"][idx]

            autocast = train_autocast(config.mixed_precision)
            with autocast:
                s_bar, i_bar = stage1_forward(gen, s_o, a, n_b)
                real_img = torch.cat([i_p, a, n_b], dim=1)
                fake_img = torch.cat([i_bar, a, n_b], dim=1)
                real_shd = torch.cat([to_log_shading(s_p), a, n_b], dim=1)
                fake_shd = torch.cat([to_log_shading(s_bar), a, n_b], dim=1)

            # discriminators
            _set_requires_grad(d_img, True)
            _set_requires_grad(d_shd, True)
            with autocast:
                d_img_loss = lsgan_d_loss(d_img, real_img, fake_img)
            opt_di.zero_grad()
            d_img_loss.backward()
            opt_di.step()

            d_shd_loss = torch.zeros(())
            if w.w_gan_shading > 0:
                with autocast:
                    d_shd_loss = lsgan_d_loss(d_shd, real_shd, fake_shd)
                opt_ds.zero_grad()
                d_shd_loss.backward()
                opt_ds.step()

            # generator
            _set_requires_grad(d_img, False)
            _set_requires_grad(d_shd, False)
            with autocast:
                perc = perceptual_loss(i_bar, i_p, extractor)
                g_loss = (w.w_perceptual * perc
                          + w.w_gan_image * lsgan_g_loss(d_img, fake_img))
                if w.w_gan_shading > 0:
                    g_loss = g_loss + w.w_gan_shading * lsgan_g_loss(d_shd,
                                                                     fake_shd)
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            _check_finite(epoch, step, g_loss=g_loss, d_img=d_img_loss,
                          d_shd=d_shd_loss, perc=perc)
            sums["g_loss"] += float(g_loss.detach())
            sums["d_img"] += float(d_img_loss.detach())
            sums["d_shd"] += float(d_shd_loss.detach())
            sums["perc"] += float(perc.detach())
            n_batches += 1

        history.append({
            "epoch": epoch,
            "g_loss": sums["g_loss"] / n_batches,
            "d_img": sums["d_img"] / n_batches,
            "d_shd": sums["d_shd"] / n_batches,
            "perc": sums["perc"] / n_batches,
            "heldout_L1": heldout_l1(),
            "lr": config.lr * factor,
        })

    return Stage1Result(generator=gen, disc_image=d_img, disc_shading=d_shd,
                        history=history, identity_l1=identity_l1, flags=flags)
