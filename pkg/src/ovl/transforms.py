"""Input corruptions that keep correlated attributes and scramble the rest.

Two families are provided: a random spatial composition (flip, then rotate,
then crop-and-resize back to full resolution) and masking with a binary
region mask. Both operate on images in [-1, 1] where -1 is black.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "TransformMode",
    "SpatialConfig",
    "SpatialTransformParams",
    "sample_spatial_params",
    "spatial_transform",
    "random_spatial_transform",
    "mask_transform",
    "apply_T",
    "transform_batch",
]

BLACK = -1.0


class TransformMode(str, enum.Enum):
    random_spatial = "random_spatial"
    mask = "mask"
    identity = "identity"


@dataclass(frozen=True)
class SpatialConfig:
    flip_prob: float = 0.5
    max_angle: float = 30.0
    crop_min: float = 0.7
    crop_max: float = 1.0

    def __post_init__(self):
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.max_angle < 0:
            raise ValueError("max_angle must be nonnegative")
        if not 0 < self.crop_min <= self.crop_max <= 1:
            raise ValueError("need 0 < crop_min <= crop_max <= 1")


@dataclass(frozen=True)
class SpatialTransformParams:
    """flip is horizontal; angle in degrees, counter-clockwise; crop_box is
    (top, left, height, width) as fractions of the image size."""

    flip: bool = False
    angle: float = 0.0
    crop_box: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)

    def __post_init__(self):
        top, left, h, w = self.crop_box
        if h <= 0 or w <= 0 or top < 0 or left < 0 or top + h > 1 + 1e-12 or left + w > 1 + 1e-12:
            raise ValueError(f"crop box {self.crop_box} is not inside the unit square")

    @property
    def is_identity_resample(self) -> bool:
        return self.angle == 0 and tuple(self.crop_box) == (0.0, 0.0, 1.0, 1.0)


def sample_spatial_params(rng: np.random.Generator, config: SpatialConfig) -> SpatialTransformParams:
    flip = bool(rng.random() < config.flip_prob)
    angle = float(rng.uniform(-config.max_angle, config.max_angle)) if config.max_angle > 0 else 0.0
    h = float(rng.uniform(config.crop_min, config.crop_max))
    w = float(rng.uniform(config.crop_min, config.crop_max))
    top = float(rng.uniform(0, 1 - h))
    left = float(rng.uniform(0, 1 - w))
    return SpatialTransformParams(flip=flip, angle=angle, crop_box=(top, left, h, w))


def _sampling_grid(params: SpatialTransformParams, H: int, W: int) -> torch.Tensor:
    """Grid mapping output pixels to source pixels of the (already flipped)
    image: the crop box selects a window of the rotated image, which is
    resized to H x W."""
    top, left, h, w = params.crop_box
    ys = (torch.arange(H, dtype=torch.float64) + 0.5) / H
    xs = (torch.arange(W, dtype=torch.float64) + 0.5) / W
    gy, gx = torch.meshgrid(top + h * ys, left + w * xs, indexing="ij")
    # pixel offsets from the image centre in the rotated frame
    qx = (gx - 0.5) * W
    qy = (gy - 0.5) * H
    a = math.radians(params.angle)
    # inverse of a counter-clockwise screen rotation (y axis points down)
    sx = math.cos(a) * qx - math.sin(a) * qy
    sy = math.sin(a) * qx + math.cos(a) * qy
    grid = torch.stack([sx / (W / 2), sy / (H / 2)], dim=-1)
    return grid


def spatial_transform(x: torch.Tensor, params: list[SpatialTransformParams]) -> torch.Tensor:
    """Apply per-sample flip -> rotate -> crop-and-resize to an N x C x H x W batch.

    Rotation and crop are resampled in one bilinear pass; regions rotated in
    from outside the frame are black.
    """
    if x.ndim != 4 or len(params) != x.shape[0]:
        raise ValueError("expected an N x C x H x W batch and one params entry per sample")
    N, C, H, W = x.shape
    flips = torch.tensor([p.flip for p in params], dtype=torch.bool)
    out = torch.where(flips[:, None, None, None], x.flip(-1), x)
    resample = [i for i, p in enumerate(params) if not p.is_identity_resample]
    if not resample:
        return out
    grid = torch.stack([_sampling_grid(params[i], H, W) for i in resample]).to(x.dtype)
    src = (out[resample] - BLACK) / 2
    warped = F.grid_sample(src, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    warped = (warped * 2 + BLACK).clamp(-1, 1)
    out = out.clone()
    out[resample] = warped
    return out


def _to_nchw(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]


def random_spatial_transform(
    image: np.ndarray,
    rng: np.random.Generator,
    config: SpatialConfig = SpatialConfig(),
    params: SpatialTransformParams | None = None,
) -> tuple[np.ndarray, SpatialTransformParams]:
    """Transform one H x W x C image. Pass ``params`` to replay a draw."""
    if params is None:
        params = sample_spatial_params(rng, config)
    out = spatial_transform(_to_nchw(image), [params])[0].permute(1, 2, 0).numpy()
    return out, params


def mask_transform(image, mask):
    """Keep pixels where ``mask`` is 1 and paint the rest black.

    Equivalent to multiplying by the mask in [0, 1] intensity space. Works on
    H x W x C arrays with H x W masks, or N x C x H x W tensors with N x 1 x H x W
    (or N x H x W) masks.
    """
    if isinstance(image, torch.Tensor):
        mask = torch.as_tensor(mask, device=image.device)
        if mask.ndim == 3:
            mask = mask[:, None]
        if mask.shape[0] != image.shape[0] or mask.shape[-2:] != image.shape[-2:]:
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match image {tuple(image.shape)}")
        return torch.where(mask.bool(), image, torch.full_like(image, BLACK))
    image = np.asarray(image)
    mask = np.asarray(mask)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    return np.where(mask.astype(bool)[..., None], image, np.asarray(BLACK, dtype=image.dtype))


def apply_T(sample, mode, rng=None, config: SpatialConfig = SpatialConfig()):
    """Dispatch one ``(image, mask)`` sample (mask may be None) to a transform."""
    mode = TransformMode(mode)
    image, mask = sample if isinstance(sample, tuple) else (sample, None)
    if mode is TransformMode.identity:
        return image
    if mode is TransformMode.mask:
        if mask is None:
            raise ValueError("mask mode requires a mask for every sample")
        return mask_transform(image, mask)
    if rng is None:
        raise ValueError("random_spatial mode needs an rng")
    return random_spatial_transform(image, rng, config)[0]


def transform_batch(
    x: torch.Tensor,
    mode,
    rng: np.random.Generator | None = None,
    config: SpatialConfig = SpatialConfig(),
    masks: torch.Tensor | None = None,
) -> torch.Tensor:
    """Batched :func:`apply_T` for N x C x H x W tensors."""
    mode = TransformMode(mode)
    if mode is TransformMode.identity:
        return x
    if mode is TransformMode.mask:
        if masks is None:
            raise ValueError("mask mode requires masks")
        return mask_transform(x, masks)
    params = [sample_spatial_params(rng, config) for _ in range(x.shape[0])]
    return spatial_transform(x, params)
