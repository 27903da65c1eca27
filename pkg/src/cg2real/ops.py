"""Differentiable image operations (torch).

These are the training-graph counterparts of the functions in
:mod:`cg2real.imaging`: elementwise Lambertian composition, the log-shading
transform pair, and a guided filter built from box sums so that gradients
flow through every step. All functions follow the dtype of their inputs, so
the same code runs in float32 for training and float64 for gradient checks;
reduced-precision inputs (from autocast regions) are promoted to float32
where cancellation would otherwise destroy accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .imaging import LOG_SHADING_EPS, ShapeError


@dataclass(frozen=True)
class GuidedFilterParams:
    """Box-window half-width and variance regularizer of the guided filter."""

    radius: int = 4
    epsilon: float = 0.01

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


def full_precision(x: torch.Tensor) -> torch.Tensor:
    """Promote reduced-precision tensors to float32; others pass through."""
    if x.dtype in (torch.bfloat16, torch.float16):
        return x.float()
    return x


def train_autocast(enabled: bool) -> torch.autocast:
    """bfloat16 autocast for training loops; losses stay in float32.

    Network outputs are promoted back via :func:`full_precision` at their
    call sites, so only the convolution-heavy trunks run reduced.
    """
    return torch.autocast("cpu", dtype=torch.bfloat16, enabled=enabled)


def compose(albedo: torch.Tensor, shading: torch.Tensor) -> torch.Tensor:
    """Elementwise product; differentiable in both arguments."""
    if albedo.shape != shading.shape:
        raise ShapeError(f"shape mismatch: {tuple(albedo.shape)} vs {tuple(shading.shape)}")
    return albedo * shading


def to_log_shading(shading: torch.Tensor, eps: float = LOG_SHADING_EPS) -> torch.Tensor:
    return torch.log(shading + eps)


def from_log_shading(x: torch.Tensor, eps: float = LOG_SHADING_EPS) -> torch.Tensor:
    return torch.clamp(torch.exp(x) - eps, min=0.0)


def _box_sum_1d(x: torch.Tensor, radius: int, dim: int) -> torch.Tensor:
    """Sliding-window sum with windows clipped at the borders."""
    n = x.shape[dim]
    cs = torch.cumsum(x, dim=dim)
    # prepend a zero so cs[i] holds the sum of entries < i
    pad = [0, 0] * (x.ndim - 1 - dim) + [1, 0]
    cs = F.pad(cs, pad)
    idx = torch.arange(n, device=x.device)
    hi = torch.clamp(idx + radius, max=n - 1) + 1
    lo = torch.clamp(idx - radius, min=0)
    return cs.index_select(dim, hi) - cs.index_select(dim, lo)


def box_sum(x: torch.Tensor, radius: int) -> torch.Tensor:
    """Sum over (2r+1)^2 windows clipped to the image, on the last two dims."""
    return _box_sum_1d(_box_sum_1d(x, radius, x.ndim - 2), radius, x.ndim - 1)


def box_window_counts(height: int, width: int, radius: int,
                      dtype=torch.float32, device=None) -> torch.Tensor:
    """Per-pixel count of valid window entries (edge-clamped windows)."""
    def axis_counts(n):
        idx = torch.arange(n, device=device)
        return (torch.clamp(idx + radius, max=n - 1) - torch.clamp(idx - radius, min=0) + 1).to(dtype)

    return axis_counts(height)[:, None] * axis_counts(width)[None, :]


def box_mean(x: torch.Tensor, radius: int) -> torch.Tensor:
    counts = box_window_counts(x.shape[-2], x.shape[-1], radius, dtype=x.dtype, device=x.device)
    return box_sum(x, radius) / counts


def guided_filter(guide: torch.Tensor, src: torch.Tensor,
                  params: GuidedFilterParams) -> torch.Tensor:
    """Edge-aware smoothing of ``src`` under the local linear model of ``guide``.

    Each channel is filtered independently against the matching guide channel.
    Window means use edge-clamped counts, so constants are preserved exactly.
    Accepts (..., C, H, W) tensors; guide and src must have the same shape.
    """
    if guide.shape != src.shape:
        raise ShapeError(f"guide/src shape mismatch: {tuple(guide.shape)} vs {tuple(src.shape)}")
    # the variance term cancels catastrophically below float32
    guide = full_precision(guide)
    src = full_precision(src)
    h, w = src.shape[-2], src.shape[-1]
    r = params.radius
    if r > min(h, w) // 2:
        raise ValueError(f"radius {r} exceeds half-extent of {h}x{w} image")

    mean_g = box_mean(guide, r)
    mean_s = box_mean(src, r)
    cov_gs = box_mean(guide * src, r) - mean_g * mean_s
    var_g = box_mean(guide * guide, r) - mean_g * mean_g

    a = cov_gs / (var_g + params.epsilon)
    b = mean_s - a * mean_g
    return box_mean(a, r) * guide + box_mean(b, r)
