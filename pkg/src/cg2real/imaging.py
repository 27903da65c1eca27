"""Image containers, Lambertian composition arithmetic, and the CG2R file format.

All buffers live in linear light as float32. Albedo values are reflectances in
[0, 1]; shading values are nonnegative and may exceed 1 (HDR). The binary
format of record is CG2R (see :func:`write_cg2r`); PNG output exists only for
previews.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_SHADING_EPS = 1e-4

_CG2R_MAGIC = b"CG2R"


class ShapeError(ValueError):
    """Raised when image dimensions do not line up."""


@dataclass(frozen=True)
class ImageF:
    """Dense float32 image in linear light, shape (height, width, channels).

    channels is 1 or 3. The array is row-major and C-contiguous; instances
    are treated as immutable.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ShapeError(f"expected HxWxC array, got shape {self.data.shape}")
        if arr.shape[2] not in (1, 3):
            raise ShapeError(f"channels must be 1 or 3, got {arr.shape[2]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains NaN or Inf")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def to_tensor(self):
        """Return a torch float32 tensor of shape (C, H, W)."""
        import torch

        return torch.from_numpy(np.ascontiguousarray(self.data.transpose(2, 0, 1)))

    @staticmethod
    def from_tensor(t) -> "ImageF":
        """Build from a torch tensor of shape (C, H, W) or (1, C, H, W)."""
        arr = t.detach().cpu().numpy()
        if arr.ndim == 4:
            if arr.shape[0] != 1:
                raise ShapeError(f"expected batch of 1, got {arr.shape[0]}")
            arr = arr[0]
        return ImageF(arr.transpose(1, 2, 0))


def _check_same_shape(a: ImageF, b: ImageF) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def compose(albedo: ImageF, shading: ImageF) -> ImageF:
    """Lambertian recomposition: the elementwise product albedo * shading."""
    _check_same_shape(albedo, shading)
    return ImageF(albedo.data * shading.data)


def decompose_given_albedo(image: ImageF, albedo: ImageF, floor: float = 1e-3) -> ImageF:
    """Recover shading as image / max(albedo, floor).

    The floor keeps the division finite on near-black albedo; wherever
    albedo >= floor, compose(albedo, result) reproduces the image.
    """
    _check_same_shape(image, albedo)
    if floor <= 0:
        raise ValueError("floor must be positive")
    return ImageF(image.data / np.maximum(albedo.data, np.float32(floor)))


def to_log_shading(shading: ImageF, eps: float = LOG_SHADING_EPS) -> ImageF:
    """Map nonnegative shading to log space: log(S + eps)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return ImageF(np.log(shading.data + np.float32(eps)))


def from_log_shading(x: ImageF, eps: float = LOG_SHADING_EPS) -> ImageF:
    """Inverse of :func:`to_log_shading`: max(exp(x) - eps, 0)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return ImageF(np.maximum(np.exp(x.data) - np.float32(eps), 0.0))


def write_cg2r(path: str | Path, image: ImageF) -> None:
    """Write the CG2R format: magic 'CG2R', u32-LE height/width/channels,
    then height*width*channels little-endian float32 values, row-major."""
    path = Path(path)
    header = _CG2R_MAGIC + struct.pack("<III", image.height, image.width, image.channels)
    payload = image.data.astype("<f4").tobytes()
    path.write_bytes(header + payload)


def read_cg2r(path: str | Path) -> ImageF:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != _CG2R_MAGIC:
        raise ValueError(f"{path}: not a CG2R file")
    h, w, c = struct.unpack("<III", raw[4:16])
    expected = 16 + h * w * c * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated CG2R file ({len(raw)} bytes, expected {expected})")
    data = np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, c)
    return ImageF(data.copy())


def write_png_preview(path: str | Path, image: ImageF, gamma: float = 1.0 / 2.2) -> None:
    """8-bit PNG preview with display gamma. Values are clamped to [0, 1]."""
    from PIL import Image

    arr = np.clip(image.data, 0.0, 1.0) ** np.float32(gamma)
    arr8 = (arr * 255.0 + 0.5).astype(np.uint8)
    if arr8.shape[2] == 1:
        arr8 = arr8[:, :, 0]
    Image.fromarray(arr8).save(Path(path))
