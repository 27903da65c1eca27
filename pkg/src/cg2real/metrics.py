"""Distribution distance and dense-prediction benchmarks.

The Frechet distance compares Gaussian fits of embedded image sets; the
task suite trains small U-Nets for normal and depth estimation and reports
the standard angular and ratio-threshold metrics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .features import default_feature_extractor
from .imaging import ShapeError
from .nets import build_task_net, load_checkpoint, save_checkpoint
from .ops import full_precision, train_autocast
from .stage1 import _check_finite, lr_factor


@dataclass(frozen=True)
class FeatureStats:
    """Gaussian summary (mean, covariance, sample count) of an embedding."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        if mu.ndim != 1 or sigma.shape != (mu.size, mu.size):
            raise ValueError(f"inconsistent stats shapes {mu.shape} / "
                             f"{sigma.shape}")
        if self.n < 1:
            raise ValueError("sample count must be >= 1")
        if not np.allclose(sigma, sigma.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")
        eigs = np.linalg.eigvalsh(sigma)
        floor = -1e-8 * max(float(np.trace(sigma)), 1.0)
        if float(eigs.min()) < floor:
            raise ValueError("covariance is not positive semidefinite")

    @property
    def dim(self) -> int:
        return self.mu.size


def _psd_sqrt(sigma: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((sigma + sigma.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(p: FeatureStats, q: FeatureStats) -> float:
    """Frechet distance between two Gaussian feature summaries.

    The covariance square root is taken by eigendecomposition of the
    symmetrized product; small negative eigenvalues are clamped to zero.
    """
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    for stats, name in ((p, "p"), (q, "q")):
        if stats.n < stats.dim + 1:
            warnings.warn(f"{name} has {stats.n} samples for dimension "
                          f"{stats.dim}; covariance is rank deficient",
                          stacklevel=2)
    diff = p.mu - q.mu
    sqrt_p = _psd_sqrt(p.sigma)
    inner = sqrt_p @ q.sigma @ sqrt_p
    w = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)
    value = (float(diff @ diff) + float(np.trace(p.sigma))
             + float(np.trace(q.sigma)) - 2.0 * float(np.sqrt(w).sum()))
    return max(value, 0.0)


def _as_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images
    return torch.stack([img.to_tensor() for img in images])


def embed_images(images, seed: int = 0, batch_size: int = 32) -> FeatureStats:
    """Embed an image set with the fixed extractor and fit a Gaussian."""
    batch = _as_batch(images)
    n = batch.shape[0]
    if n < 2:
        raise ValueError("need at least 2 images to fit feature statistics")
    extractor = default_feature_extractor(seed=seed)
    feats = []
    with torch.no_grad():
        for i in range(0, n, batch_size):
            feats.append(extractor.embed(batch[i:i + batch_size]))
    x = torch.cat(feats).double().numpy()
    mu = x.mean(axis=0)
    sigma = np.cov(x, rowvar=False)
    return FeatureStats(mu=mu, sigma=sigma, n=n)


THRESHOLDS_ANGLE = (11.25, 22.5, 30.0)
THRESHOLDS_DELTA = (1.25, 1.25 ** 2, 1.25 ** 3)


@dataclass(frozen=True)
class NormalMetrics:
    mean_angle: float
    median_angle: float
    pct_below_11_25: float
    pct_below_22_5: float
    pct_below_30: float

    def __post_init__(self):
        pcts = (self.pct_below_11_25, self.pct_below_22_5, self.pct_below_30)
        if not all(-1e-6 <= p <= 100 + 1e-6 for p in pcts):
            raise ValueError("percentages must lie in [0, 100]")
        if not (pcts[0] <= pcts[1] + 1e-9 and pcts[1] <= pcts[2] + 1e-9):
            raise ValueError("threshold percentages must be nondecreasing")

    def as_dict(self) -> dict:
        return {"mean_angle": self.mean_angle,
                "median_angle": self.median_angle,
                "pct_below_11_25": self.pct_below_11_25,
                "pct_below_22_5": self.pct_below_22_5,
                "pct_below_30": self.pct_below_30}


@dataclass(frozen=True)
class DepthMetrics:
    rmse: float
    rmse_log: float
    pct_delta_1: float
    pct_delta_2: float
    pct_delta_3: float

    def __post_init__(self):
        pcts = (self.pct_delta_1, self.pct_delta_2, self.pct_delta_3)
        if not all(-1e-6 <= p <= 100 + 1e-6 for p in pcts):
            raise ValueError("percentages must lie in [0, 100]")
        if not (pcts[0] <= pcts[1] + 1e-9 and pcts[1] <= pcts[2] + 1e-9):
            raise ValueError("threshold percentages must be nondecreasing")

    def as_dict(self) -> dict:
        return {"rmse": self.rmse, "rmse_log": self.rmse_log,
                "pct_delta_1": self.pct_delta_1,
                "pct_delta_2": self.pct_delta_2,
                "pct_delta_3": self.pct_delta_3}


def _normalize(vecs: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return vecs / (vecs.norm(dim=1, keepdim=True) + eps)


def normal_valid_mask(gt_normals: torch.Tensor) -> torch.Tensor:
    """Surface pixels have (near) unit normals; empty pixels are zero."""
    return gt_normals.norm(dim=1) > 0.5


def normal_metrics(pred: torch.Tensor, gt: torch.Tensor) -> NormalMetrics:
    """Angular error statistics over valid pixels, pooled across images."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} does not match "
                         f"ground truth {tuple(gt.shape)}")
    mask = normal_valid_mask(gt)
    dots = (_normalize(pred) * _normalize(gt)).sum(dim=1)
    dots = torch.clamp(dots[mask], -1.0, 1.0)
    angles = torch.rad2deg(torch.acos(dots.double())).numpy()
    if angles.size == 0:
        raise ValueError("no valid pixels to evaluate")
    pct = [100.0 * float(np.mean(angles < t)) for t in THRESHOLDS_ANGLE]
    return NormalMetrics(float(angles.mean()), float(np.median(angles)),
                         *pct)


def depth_metrics(pred: torch.Tensor, gt: torch.Tensor) -> DepthMetrics:
    """RMSE and ratio-threshold statistics over valid (positive) pixels."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} does not match "
                         f"ground truth {tuple(gt.shape)}")
    mask = gt > 0
    d_pred = torch.clamp(pred[mask], min=1e-6).double().numpy()
    d_gt = gt[mask].double().numpy()
    if d_gt.size == 0:
        raise ValueError("no valid pixels to evaluate")
    rmse = float(np.sqrt(np.mean((d_pred - d_gt) ** 2)))
    rmse_log = float(np.sqrt(np.mean((np.log(d_pred) - np.log(d_gt)) ** 2)))
    delta = np.maximum(d_pred / d_gt, d_gt / d_pred)
    pct = [100.0 * float(np.mean(delta < t)) for t in THRESHOLDS_DELTA]
    return DepthMetrics(rmse, rmse_log, *pct)


def normal_task_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean inverse dot product over valid pixels, predictions normalized."""
    mask = normal_valid_mask(gt)
    dots = (_normalize(pred) * gt).sum(dim=1)
    return (1.0 - dots[mask]).mean()


def depth_task_loss(pred_log: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """L1 on log depth over valid pixels; the net predicts log depth."""
    mask = gt > 0
    return (pred_log[mask] - torch.log(gt[mask])).abs().mean()


TASKS = ("normal", "depth")


@dataclass(frozen=True)
class TaskConfig:
    task: str = "normal"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-4
    seed: int = 0
    base_channels: int = 32
    depth: int = 4
    mixed_precision: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class TaskResult:
    net: nn.Module
    task: str
    history: list[dict]


def _check_task_data(images: torch.Tensor, labels: torch.Tensor,
                     task: str) -> None:
    if images.shape[0] != labels.shape[0]:
        raise ShapeError(f"{images.shape[0]} images vs {labels.shape[0]} "
                         "labels")
    if images.shape[-2:] != labels.shape[-2:]:
        raise ShapeError("image and label resolutions differ")
    want = 3 if task == "normal" else 1
    if labels.shape[1] != want:
        raise ShapeError(f"{task} labels need {want} channels, got "
                         f"{labels.shape[1]}")


def train_task_net(images: torch.Tensor, labels: torch.Tensor,
                   config: TaskConfig = TaskConfig()) -> TaskResult:
    """Train a dense-prediction U-Net on (image, label) pairs.

    Normals are supervised with the inverse dot product; depth with L1 on
    log depth. The depth net therefore predicts log depth.
    """
    _check_task_data(images, labels, config.task)
    if images.shape[0] == 0:
        raise ValueError("empty training set")
    out_channels = 3 if config.task == "normal" else 1
    net = build_task_net(out_channels=out_channels,
                         base=config.base_channels, depth=config.depth,
                         seed=config.seed)
    loss_fn = normal_task_loss if config.task == "normal" else depth_task_loss
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    rng = np.random.default_rng([config.seed, 0x7A5C])
    n = images.shape[0]
    batch = min(config.batch_size, n)
    steps = max(1, n // batch)

    history = []
    for epoch in range(1, config.epochs + 1):
        factor = lr_factor(epoch, config.epochs)
        for group in opt.param_groups:
            group["lr"] = config.lr * factor
        perm = rng.permutation(n)
        total = 0.0
        for step in range(steps):
            idx = perm[step * batch:(step + 1) * batch]
            with train_autocast(config.mixed_precision):
                loss = loss_fn(full_precision(net(images[idx])), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            _check_finite(epoch, step, loss=loss)
            total += float(loss.detach())
        history.append({"epoch": epoch, "loss": total / steps,
                        "lr": config.lr * factor})
    return TaskResult(net, config.task, history)


def save_task_checkpoint(path, result: TaskResult) -> None:
    net = result.net
    base = net.encoder.stem[0].out_channels
    save_checkpoint(path, net, {"type": "task", "task": result.task,
                                "base": base, "depth": net.depth})


def load_task_checkpoint(path) -> TaskResult:
    meta, state = load_checkpoint(path)
    if meta.get("type") != "task":
        raise ValueError(f"{path} is not a task checkpoint")
    out_channels = 3 if meta["task"] == "normal" else 1
    net = build_task_net(out_channels=out_channels, base=meta["base"],
                         depth=meta["depth"])
    net.load_state_dict(state)
    return TaskResult(net, meta["task"], [])


def evaluate_task(result: TaskResult, images: torch.Tensor,
                  labels: torch.Tensor, batch_size: int = 16):
    """Evaluate a trained task net; returns NormalMetrics or DepthMetrics."""
    _check_task_data(images, labels, result.task)
    if images.shape[0] == 0:
        raise ValueError("empty test set")
    result.net.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            preds.append(result.net(images[i:i + batch_size]))
    pred = torch.cat(preds)
    if result.task == "normal":
        return normal_metrics(pred, labels)
    return depth_metrics(torch.exp(pred), labels)
