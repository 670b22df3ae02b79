"""Generator, encoders and discriminator at desk scale.

The generator starts from a learned constant 4x4 tensor and refines it through
upsampling conv blocks; each block's activations are scaled and shifted by an
affine map of the concatenated latent ``[y | c | u]``. There is no noise
injection and no encoder-to-decoder skip path. Encoders and the discriminator
share one downsampling template.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ArchConfig",
    "Dims",
    "Generator",
    "Encoder",
    "Discriminator",
    "ConvClassifier",
    "ModelBundle",
    "generate",
    "encode_correlated",
    "encode_label",
    "encode_uncorrelated",
    "discriminate",
    "label_embedding_lookup",
    "expected_parameter_count",
]

LRELU_SLOPE = 0.2


@dataclass(frozen=True)
class ArchConfig:
    base_channels: int = 32
    num_scales: int = 4
    latent_concat: bool = field(default=True, init=False)
    use_noise_injection: bool = field(default=False, init=False)

    def __post_init__(self):
        if self.base_channels < 1 or self.num_scales < 1:
            raise ValueError("base_channels and num_scales must be positive")

    @property
    def resolution(self) -> int:
        return 4 * 2 ** (self.num_scales - 1)

    def channels(self, i: int) -> int:
        """Width at scale ``i`` (0 = 4x4, num_scales-1 = full resolution)."""
        return self.base_channels * 2 ** min(self.num_scales - 1 - i, 2)


@dataclass(frozen=True)
class Dims:
    d_y: int = 32
    d_c: int = 16
    d_u: int = 16
    H: int = 32
    W: int = 32
    C: int = 3

    @property
    def latent(self) -> int:
        return self.d_y + self.d_c + self.d_u


def _init_fan_in(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_in))
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class StyledBlock(nn.Module):
    def __init__(self, cin: int, cout: int, latent_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.affine = nn.Linear(latent_dim, 2 * cout)

    def forward(self, h, w):
        if self.upsample:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv(h)
        gamma, beta = self.affine(w).chunk(2, dim=1)
        h = h * (1 + gamma[:, :, None, None]) + beta[:, :, None, None]
        return F.leaky_relu(h, LRELU_SLOPE)


class Generator(nn.Module):
    def __init__(self, arch: ArchConfig, latent_dim: int, out_channels: int = 3):
        super().__init__()
        self.latent_dim = latent_dim
        c0 = arch.channels(0)
        self.seed = nn.Parameter(torch.randn(1, c0, 4, 4))
        blocks = [StyledBlock(c0, c0, latent_dim, upsample=False)]
        for i in range(1, arch.num_scales):
            blocks.append(StyledBlock(arch.channels(i - 1), arch.channels(i), latent_dim, upsample=True))
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.Conv2d(arch.channels(arch.num_scales - 1), out_channels, 1)
        _init_fan_in(self)
        # small modulation at start so every block begins near its plain conv
        for b in self.blocks:
            b.affine.weight.data.mul_(0.1)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        if w.ndim != 2 or w.shape[1] != self.latent_dim:
            raise ValueError(f"generator expects latents of width {self.latent_dim}, got {tuple(w.shape)}")
        h = self.seed.expand(w.shape[0], -1, -1, -1)
        for block in self.blocks:
            h = block(h, w)
        return torch.tanh(self.to_rgb(h))


class _DownTrunk(nn.Module):
    """Full-resolution image to ``channels(0) x 4 x 4`` features."""

    def __init__(self, arch: ArchConfig, in_channels: int):
        super().__init__()
        S = arch.num_scales
        layers = [nn.Conv2d(in_channels, arch.channels(S - 1), 3, padding=1), nn.LeakyReLU(LRELU_SLOPE)]
        for i in range(S - 1, 0, -1):
            layers += [nn.Conv2d(arch.channels(i), arch.channels(i - 1), 4, stride=2, padding=1),
                       nn.LeakyReLU(LRELU_SLOPE)]
        self.net = nn.Sequential(*layers)
        self.resolution = arch.resolution
        self.in_channels = in_channels

    def forward(self, x):
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.resolution, self.resolution):
            raise ValueError(
                f"expected N x {self.in_channels} x {self.resolution} x {self.resolution}, got {tuple(x.shape)}"
            )
        return self.net(x)


class Encoder(nn.Module):
    """Downsampling conv encoder with a single linear head; no per-domain layers."""

    def __init__(self, arch: ArchConfig, out_dim: int, in_channels: int = 3):
        super().__init__()
        self.out_dim = out_dim
        self.trunk = _DownTrunk(arch, in_channels)
        self.head = nn.Linear(arch.channels(0) * 16, out_dim)
        _init_fan_in(self)

    def forward(self, x):
        return self.head(self.trunk(x).flatten(1))


class ConvClassifier(nn.Module):
    """Encoder template plus a class (or regression) head; used for oracles
    and the leakage classifier. ``features`` is the penultimate layer."""

    def __init__(self, arch: ArchConfig, out_dim: int, feature_dim: int = 32, in_channels: int = 3):
        super().__init__()
        self.encoder = Encoder(arch, feature_dim, in_channels)
        self.out = nn.Linear(feature_dim, out_dim)
        _init_fan_in(self.out)

    def features(self, x):
        return F.leaky_relu(self.encoder(x), LRELU_SLOPE)

    def forward(self, x):
        return self.out(self.features(x))


class MinibatchStddev(nn.Module):
    def __init__(self, group_size: int = 4):
        super().__init__()
        self.group_size = group_size

    def forward(self, x):
        N, C, H, W = x.shape
        g = min(self.group_size, N)
        while N % g:
            g -= 1
        y = x.reshape(g, N // g, C, H, W)
        # shifted so identical samples give exactly 0 while the gradient stays finite
        y = (y.var(dim=0, unbiased=False) + 1e-8).sqrt() - 1e-4
        y = y.mean(dim=(1, 2, 3))
        y = y.repeat(g)[:, None, None, None].expand(N, 1, H, W)
        return torch.cat([x, y], dim=1)


class Discriminator(nn.Module):
    def __init__(self, arch: ArchConfig, in_channels: int = 3):
        super().__init__()
        c0 = arch.channels(0)
        self.trunk = _DownTrunk(arch, in_channels)
        self.mbstd = MinibatchStddev()
        self.conv = nn.Conv2d(c0 + 1, c0, 3, padding=1)
        self.head = nn.Linear(c0 * 16, 1)
        _init_fan_in(self)

    def forward(self, x):
        h = self.mbstd(self.trunk(x))
        h = F.leaky_relu(self.conv(h), LRELU_SLOPE)
        return self.head(h.flatten(1))[:, 0]


def _trunk_params(arch: ArchConfig, C: int) -> int:
    S = arch.num_scales
    n = C * arch.channels(S - 1) * 9 + arch.channels(S - 1)
    for i in range(S - 1, 0, -1):
        n += arch.channels(i) * arch.channels(i - 1) * 16 + arch.channels(i - 1)
    return n


def expected_parameter_count(arch: ArchConfig, dims: Dims) -> dict[str, int]:
    """Closed-form parameter counts for every network in a full bundle."""
    S, C, L = arch.num_scales, dims.C, dims.latent
    ch = arch.channels
    g = ch(0) * 16
    g += ch(0) * ch(0) * 9 + ch(0) + L * 2 * ch(0) + 2 * ch(0)
    for i in range(1, S):
        g += ch(i - 1) * ch(i) * 9 + ch(i) + L * 2 * ch(i) + 2 * ch(i)
    g += ch(S - 1) * C + C

    def enc(d):
        return _trunk_params(arch, C) + ch(0) * 16 * d + d

    d = _trunk_params(arch, C) + (ch(0) + 1) * ch(0) * 9 + ch(0) + ch(0) * 16 + 1
    return {"G": g, "Ec": enc(dims.d_c), "Ey": enc(dims.d_y), "Eu": enc(dims.d_u), "D": d}


NETWORK_NAMES = ("G", "Ec", "Ey", "Eu", "D")


class ModelBundle:
    """Holds whichever of G, Ec, Ey, Eu, D exist for a run.

    ``dims.d_c == 0`` marks a bundle without the correlated branch.
    """

    def __init__(self, arch: ArchConfig, dims: Dims, G=None, Ec=None, Ey=None, Eu=None, D=None):
        if dims.H != arch.resolution or dims.W != arch.resolution:
            raise ValueError(
                f"arch with {arch.num_scales} scales produces {arch.resolution}x{arch.resolution}, "
                f"images are {dims.H}x{dims.W}"
            )
        self.arch = arch
        self.dims = dims
        self.G, self.Ec, self.Ey, self.Eu, self.D = G, Ec, Ey, Eu, D

    @classmethod
    def build(cls, arch: ArchConfig, dims: Dims, networks=NETWORK_NAMES) -> "ModelBundle":
        nets = {}
        if "G" in networks:
            nets["G"] = Generator(arch, dims.latent, dims.C)
        if "Ec" in networks and dims.d_c > 0:
            nets["Ec"] = Encoder(arch, dims.d_c, dims.C)
        if "Ey" in networks:
            nets["Ey"] = Encoder(arch, dims.d_y, dims.C)
        if "Eu" in networks:
            nets["Eu"] = Encoder(arch, dims.d_u, dims.C)
        if "D" in networks:
            nets["D"] = Discriminator(arch, dims.C)
        return cls(arch, dims, **nets)

    def networks(self) -> dict[str, nn.Module]:
        return {n: getattr(self, n) for n in NETWORK_NAMES if getattr(self, n) is not None}

    def parameter_count(self) -> dict[str, int]:
        return {n: sum(p.numel() for p in m.parameters()) for n, m in self.networks().items()}

    def named_blocks(self):
        for name, net in self.networks().items():
            for key, value in net.state_dict().items():
                yield f"{name}.{key}", value

    def copy(self) -> "ModelBundle":
        import copy

        return ModelBundle(self.arch, self.dims, **{n: copy.deepcopy(m) for n, m in self.networks().items()})

    def eval(self) -> "ModelBundle":
        for m in self.networks().values():
            m.eval()
        return self


def _check_width(vec, width, name):
    if vec.ndim != 2 or vec.shape[1] != width:
        raise ValueError(f"{name} must be a batch of {width}-vectors, got {tuple(vec.shape)}")


def generate(y_vec, c_vec, u_vec, G: Generator, dims: Dims | None = None) -> torch.Tensor:
    """G([y | c | u]). ``c_vec`` may be None for bundles without the correlated branch."""
    if dims is not None:
        _check_width(y_vec, dims.d_y, "y_vec")
        _check_width(u_vec, dims.d_u, "u_vec")
        if dims.d_c:
            _check_width(c_vec, dims.d_c, "c_vec")
    parts = [y_vec] + ([c_vec] if c_vec is not None else []) + [u_vec]
    return G(torch.cat(parts, dim=1))


def encode_correlated(x_corr, E_c: Encoder):
    return E_c(x_corr)


def encode_label(x, E_y: Encoder):
    return E_y(x)


def encode_uncorrelated(x, E_u: Encoder):
    return E_u(x)


def discriminate(x, D: Discriminator):
    return D(x)


def label_embedding_lookup(labels=None, y_embed: torch.Tensor | None = None, images=None, E_y=None):
    """Class rows of ``y_embed`` (table mode) or ``E_y(images)`` (image-guided mode)."""
    if E_y is not None and images is not None:
        return E_y(images)
    if y_embed is None or labels is None:
        raise ValueError("table mode needs labels and y_embed; image mode needs images and E_y")
    labels = torch.as_tensor(labels, dtype=torch.int64)
    if labels.numel() and (labels.min() < 0 or labels.max() >= y_embed.shape[0]):
        raise IndexError(f"label out of range [0, {y_embed.shape[0]})")
    return y_embed[labels]
