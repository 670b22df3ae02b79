"""Synthetic factor-controlled image benchmark and image-folder ingestion.

Every rendered sample is a filled polygon on a black canvas. The labeled
attribute ``y`` picks the hue family, the correlated factor ``corr`` picks the
interior pattern, a slight hue shift and the texture of a fixed band across the
top of the canvas, and the pose (position, rotation, scale) places the polygon.
Pose is drawn independently of ``y`` and ``corr``; ``corr`` is tied to ``y``
through :class:`CorrelationSpec.allowed`.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "FactorTuple",
    "CorrelationSpec",
    "Dataset",
    "InvalidCanvasError",
    "DatasetLoadError",
    "default_spec",
    "sample_factors",
    "render_sample",
    "build_dataset",
    "load_folder_dataset",
    "band_height",
    "to_uint8",
    "from_uint8",
]

MIN_CANVAS = 16
SUPERSAMPLE = 2

# Polygon outline in the shape frame (y axis points down, unit radius).
# Convex, mirror-symmetric about the vertical axis, no rotational symmetry.
_OUTLINE = np.array(
    [
        (0.0, -1.0),
        (0.62, -0.15),
        (0.75, 0.55),
        (0.3, 0.9),
        (-0.3, 0.9),
        (-0.75, 0.55),
        (-0.62, -0.15),
    ]
)

_PATTERN_PERIOD = 0.6
_N_PATTERNS = 6


class InvalidCanvasError(ValueError):
    pass


class DatasetLoadError(ValueError):
    pass


@dataclass(frozen=True)
class FactorTuple:
    """Ground-truth generative factors of one synthetic sample."""

    y: int
    corr: int
    dx: float
    dy: float
    theta: float
    scale: float

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.theta, self.scale])

    def pose_features(self) -> np.ndarray:
        """Pose as a regression target; the angle is embedded on the circle."""
        return np.array(
            [self.dx, self.dy, math.cos(self.theta), math.sin(self.theta), self.scale]
        )


@dataclass(frozen=True)
class CorrelationSpec:
    """Which correlated-factor values each class may take, plus pose intervals.

    ``pose_dist`` maps ``dx``, ``dy``, ``theta`` and ``scale`` to closed
    sampling intervals that must lie inside the declared factor ranges
    (``dx, dy`` in [-1, 1], ``theta`` in [0, 2*pi), ``scale`` in [0.5, 1]).
    """

    K: int
    M: int
    allowed: tuple[tuple[int, ...], ...]
    pose_dist: dict = field(
        default_factory=lambda: {
            "dx": (-0.2, 0.2),
            "dy": (-0.15, 0.15),
            "theta": (0.0, 2 * math.pi),
            "scale": (0.5, 1.0),
        }
    )

    def __post_init__(self):
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be positive")
        if len(self.allowed) != self.K:
            raise ValueError(f"allowed has {len(self.allowed)} entries, expected K={self.K}")
        covered = set()
        for k, values in enumerate(self.allowed):
            if not values:
                raise ValueError(f"allowed[{k}] is empty")
            if any(not 0 <= v < self.M for v in values):
                raise ValueError(f"allowed[{k}] has values outside [0, {self.M})")
            covered.update(values)
        if covered != set(range(self.M)):
            raise ValueError("allowed sets do not cover every correlated value")
        bounds = {"dx": (-1.0, 1.0), "dy": (-1.0, 1.0), "theta": (0.0, 2 * math.pi), "scale": (0.5, 1.0)}
        for name, (lo, hi) in bounds.items():
            a, b = self.pose_dist[name]
            if not (lo <= a <= b <= hi):
                raise ValueError(f"pose interval for {name} must lie in [{lo}, {hi}]")

    @property
    def correlated(self) -> bool:
        return any(len(set(v)) < self.M for v in self.allowed)


def default_spec(K: int = 3, M: int = 6) -> CorrelationSpec:
    """K classes with M correlated values split into disjoint contiguous groups."""
    if M < K:
        raise ValueError("need at least one correlated value per class")
    groups = np.array_split(np.arange(M), K)
    return CorrelationSpec(K=K, M=M, allowed=tuple(tuple(int(v) for v in g) for g in groups))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable image collection. Images are N x H x W x C in [-1, 1]."""

    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray | None = None
    factors: tuple[FactorTuple, ...] | None = None
    num_classes: int | None = None

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be N x H x W x C, got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError("labels must have one entry per image")
        if images.size and (images.min() < -1 or images.max() > 1):
            raise ValueError("pixel values must lie in [-1, 1]")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        k = self.num_classes if self.num_classes is not None else int(labels.max(initial=-1)) + 1
        if labels.size and labels.max() >= k:
            raise ValueError(f"labels must lie in [0, {k})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", k)
        if self.masks is not None:
            masks = np.ascontiguousarray(self.masks, dtype=np.uint8)
            if masks.shape != images.shape[:3]:
                raise ValueError(f"masks must be N x H x W, got {masks.shape}")
            if np.any(masks > 1):
                raise ValueError("masks must be binary")
            masks.setflags(write=False)
            object.__setattr__(self, "masks", masks)
        if self.factors is not None:
            factors = tuple(self.factors)
            if len(factors) != len(labels):
                raise ValueError("factors must have one entry per image")
            object.__setattr__(self, "factors", factors)

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            images=self.images[index],
            labels=self.labels[index],
            masks=None if self.masks is None else self.masks[index],
            factors=None if self.factors is None else tuple(self.factors[i] for i in index),
            num_classes=self.num_classes,
        )

    def corr_labels(self) -> np.ndarray:
        self._require_factors()
        return np.array([f.corr for f in self.factors], dtype=np.int64)

    def pose_targets(self) -> np.ndarray:
        self._require_factors()
        return np.stack([f.pose_features() for f in self.factors])

    def _require_factors(self):
        if self.factors is None:
            raise ValueError("dataset carries no ground-truth factors")


def sample_factors(rng: np.random.Generator, spec: CorrelationSpec) -> FactorTuple:
    y = int(rng.integers(spec.K))
    allowed = spec.allowed[y]
    corr = int(allowed[rng.integers(len(allowed))])
    pose = {name: float(rng.uniform(*spec.pose_dist[name])) for name in ("dx", "dy", "theta", "scale")}
    # theta's interval is closed on the right; keep the value in [0, 2*pi)
    pose["theta"] = pose["theta"] % (2 * math.pi)
    return FactorTuple(y=y, corr=corr, **pose)


def band_height(H: int) -> int:
    return max(2, round(H * 0.1875))


def _color(y: int, corr: int, K: int) -> np.ndarray:
    hue = (y / max(K, 1) + (0.04 if corr % 2 else -0.04)) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.95))


def _interior_pattern(kind: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    p = _PATTERN_PERIOD
    if kind == 0:
        return np.ones_like(u)
    if kind == 1:
        return (np.floor(v / p) % 2).astype(float)
    if kind == 2:
        return ((np.floor(u / p) + np.floor(v / p)) % 2).astype(float)
    if kind == 3:
        du = u / p - np.round(u / p)
        dv = v / p - np.round(v / p)
        return (du**2 + dv**2 > 0.35**2).astype(float)
    if kind == 4:
        return (np.floor(np.hypot(u, v) / (0.7 * p)) % 2).astype(float)
    return (np.floor(u / p) % 2).astype(float)


def _band_pattern(kind: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # rows/cols in low-resolution pixel units
    if kind == 0:
        return np.ones_like(cols)
    if kind in (1, 2, 3):
        period = {1: 2, 2: 4, 3: 8}[kind]
        return (np.floor(cols / (period / 2)) % 2).astype(float)
    cell = 2 if kind == 4 else 4
    return ((np.floor(cols / cell) + np.floor(rows / cell)) % 2).astype(float)


def render_sample(factors: FactorTuple, canvas: tuple[int, int], K: int = 3) -> np.ndarray:
    """Render one H x W x 3 image in [-1, 1]. Deterministic in its inputs."""
    H, W = canvas
    if H < MIN_CANVAS or W < MIN_CANVAS:
        raise InvalidCanvasError(f"canvas must be at least {MIN_CANVAS}x{MIN_CANVAS}, got {H}x{W}")
    ss = SUPERSAMPLE
    rows = (np.arange(H * ss) + 0.5) / ss
    cols = (np.arange(W * ss) + 0.5) / ss
    rr, cc = np.meshgrid(rows, cols, indexing="ij")

    band_h = band_height(H)
    cx = W / 2 + factors.dx * W / 2
    cy = band_h + (H - band_h) / 2 + factors.dy * H / 2
    radius = factors.scale * 0.26 * min(H, W)
    cos_t, sin_t = math.cos(factors.theta), math.sin(factors.theta)
    px, py = cc - cx, rr - cy
    u = (cos_t * px + sin_t * py) / radius
    v = (-sin_t * px + cos_t * py) / radius

    inside = np.ones_like(u, dtype=bool)
    n = len(_OUTLINE)
    for i in range(n):
        (x0, y0), (x1, y1) = _OUTLINE[i], _OUTLINE[(i + 1) % n]
        # outline is clockwise on screen, so interior is on the right of each edge
        inside &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0

    color = _color(factors.y, factors.corr, K)
    intensity = np.where(inside, 0.4 + 0.6 * _interior_pattern(factors.corr % _N_PATTERNS, u, v), 0.0)
    in_band = rr < band_h
    band = 0.3 + 0.7 * _band_pattern(factors.corr % _N_PATTERNS, rr, cc)
    intensity = np.where(in_band, band, intensity)

    hi = intensity[..., None] * color
    lo = hi.reshape(H, ss, W, ss, 3).mean(axis=(1, 3))
    return (lo * 2 - 1).astype(np.float32)


def band_mask(canvas: tuple[int, int]) -> np.ndarray:
    H, W = canvas
    mask = np.zeros((H, W), dtype=np.uint8)
    mask[: band_height(H)] = 1
    return mask


def build_dataset(
    spec: CorrelationSpec,
    n: int,
    canvas: tuple[int, int],
    rng: np.random.Generator,
    with_masks: bool = False,
) -> Dataset:
    if n < 1:
        raise ValueError("n must be at least 1")
    factors = [sample_factors(rng, spec) for _ in range(n)]
    images = np.stack([render_sample(f, canvas, spec.K) for f in factors])
    masks = np.broadcast_to(band_mask(canvas), (n, *canvas)).copy() if with_masks else None
    return Dataset(
        images=images,
        labels=np.array([f.y for f in factors]),
        masks=masks,
        factors=tuple(factors),
        num_classes=spec.K,
    )


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(image) + 1) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float32) / 127.5 - 1).astype(np.float32)


def _read_labels(labels_file: Path) -> dict[str, int]:
    labels = {}
    for lineno, line in enumerate(labels_file.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, label = line.rstrip("\n").split("\t")
            labels[name] = int(label)
        except ValueError:
            raise DatasetLoadError(f"{labels_file}:{lineno}: expected 'filename<TAB>label_id'") from None
    return labels


def load_folder_dataset(
    image_dir,
    labels_file,
    masks_dir=None,
    size: tuple[int, int] = (32, 32),
) -> Dataset:
    """Load PNG images, resize to ``size`` and normalize to [-1, 1]."""
    image_dir = Path(image_dir)
    labels = _read_labels(Path(labels_file))
    files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DatasetLoadError(f"no PNG images in {image_dir}")
    H, W = size
    images, ids, masks = [], [], []
    for path in files:
        if path.name not in labels:
            raise DatasetLoadError(f"no label for image {path.name}")
        with Image.open(path) as im:
            im = im.convert("RGB")
            original = im.size
            if im.size != (W, H):
                im = im.resize((W, H), Image.BILINEAR)
            images.append(from_uint8(np.asarray(im)))
        ids.append(labels[path.name])
        if masks_dir is not None:
            mask_path = Path(masks_dir) / path.name
            if not mask_path.exists():
                raise DatasetLoadError(f"no mask for image {path.name}")
            with Image.open(mask_path) as m:
                m = m.convert("L")
                if m.size != original:
                    raise DatasetLoadError(
                        f"mask {mask_path.name} has size {m.size}, image has {original}"
                    )
                m = m.resize((W, H), Image.NEAREST)
                masks.append((np.asarray(m) > 127).astype(np.uint8))
    return Dataset(
        images=np.stack(images),
        labels=np.array(ids),
        masks=np.stack(masks) if masks else None,
    )
