"""Training objectives for both stages. All reductions are batch means."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .latents import bottleneck_penalty, noisy_bottleneck
from .nets import generate
from .transforms import SpatialConfig, transform_batch

__all__ = [
    "FeatureLossConfig",
    "LossWeights",
    "random_feature_weights",
    "reconstruction_loss",
    "disentanglement_objective",
    "encoder_distillation_loss",
    "amortized_reconstruction",
    "generation_loss",
    "adversarial_losses",
    "r1_penalty",
    "discriminator_loss",
    "synthesis_objective",
]

LOSS_KINDS = ("pixel_l1", "multiscale_l1", "fixed_random_features")
FEATURE_CHANNELS = (8, 16, 32)


@dataclass(frozen=True)
class FeatureLossConfig:
    kind: str = "multiscale_l1"
    scale_weights: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    feature_net_seed: int = 0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        w = np.asarray(self.scale_weights, dtype=float)
        if len(w) != 3 or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("scale_weights must be three nonnegative weights summing to 1")


@dataclass(frozen=True)
class LossWeights:
    lambda_b: float = 0.001
    lambda_enc: float = 10.0
    lambda_adv: float = 1.0
    r1_gamma: float = 1.0

    def __post_init__(self):
        for name in ("lambda_b", "lambda_enc", "lambda_adv", "r1_gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative")


@functools.lru_cache(maxsize=8)
def random_feature_weights(seed: int, in_channels: int = 3) -> tuple[tuple[torch.Tensor, torch.Tensor], ...]:
    """Frozen conv weights of the random feature pyramid, in float64."""
    gen = torch.Generator().manual_seed(seed)
    layers = []
    cin = in_channels
    for cout in FEATURE_CHANNELS:
        w = torch.randn(cout, cin, 3, 3, generator=gen, dtype=torch.float64) * (2.0 / (cin * 9)) ** 0.5
        b = torch.randn(cout, generator=gen, dtype=torch.float64) * 0.1
        layers.append((w, b))
        cin = cout
    return tuple(layers)


def _random_features(x: torch.Tensor, seed: int) -> list[torch.Tensor]:
    feats = []
    h = x
    for i, (w, b) in enumerate(random_feature_weights(seed, x.shape[1])):
        if i:
            h = F.avg_pool2d(h, 2)
        h = F.leaky_relu(F.conv2d(h, w.to(x.dtype), b.to(x.dtype), padding=1), 0.2)
        feats.append(h)
    return feats


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(x_hat: torch.Tensor, x: torch.Tensor, cfg: FeatureLossConfig = FeatureLossConfig()):
    _check_same_shape(x_hat, x)
    if cfg.kind == "pixel_l1":
        return (x_hat - x).abs().mean()
    if cfg.kind == "multiscale_l1":
        total = x.new_zeros(())
        a, b = x_hat, x
        for k, w in enumerate(cfg.scale_weights):
            if k:
                a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
            total = total + w * (a - b).abs().mean()
        return total
    fa = _random_features(x_hat, cfg.feature_net_seed)
    fb = _random_features(x, cfg.feature_net_seed)
    return sum((p - q).pow(2).mean() for p, q in zip(fa, fb)) / len(fa)


def disentanglement_objective(
    batch: dict,
    bank,
    G,
    E_c,
    weights: LossWeights,
    rng: torch.Generator | None,
    cfg: FeatureLossConfig = FeatureLossConfig(),
    noise_std: float = 1.0,
    t_mode="random_spatial",
    t_rng: np.random.Generator | None = None,
    t_config: SpatialConfig = SpatialConfig(),
    E_u=None,
    E_y=None,
):
    """Stage-1 loss: reconstruction from ``[y, E_c(T(x)), u' + z]`` plus the
    weighted bottleneck penalty.

    ``batch`` holds ``x`` (N x C x H x W), ``labels``, ``index`` (bank rows) and
    optionally ``masks`` or a precomputed ``x_corr``. ``E_u`` switches the
    uncorrelated code to an amortized encoder; ``E_y`` switches the label code
    to image-guided mode. ``E_c=None`` drops the correlated branch.
    """
    x = batch["x"]
    if E_y is not None:
        y_vec = E_y(x)
    else:
        y_vec = bank.y_embed[torch.as_tensor(batch["labels"], dtype=torch.int64)]
    if E_u is not None:
        u_prime = E_u(x)
    else:
        u_prime = bank.u_prime[torch.as_tensor(batch["index"], dtype=torch.int64)]
    c_vec = None
    if E_c is not None:
        x_corr = batch.get("x_corr")
        if x_corr is None:
            x_corr = transform_batch(x, t_mode, t_rng, t_config, batch.get("masks"))
        c_vec = E_c(x_corr)
    u = noisy_bottleneck(u_prime, rng, noise_std)
    x_hat = generate(y_vec, c_vec, u, G)
    rec = reconstruction_loss(x_hat, x, cfg)
    pen = bottleneck_penalty(u_prime)
    total = rec + weights.lambda_b * pen
    return total, {"rec": rec, "bottleneck": pen, "total": total}


def encoder_distillation_loss(x, y_targets, u_targets, E_y, E_u):
    """Batch mean of ||E_y(x) - y||^2 + ||E_u(x) - u||^2. Either encoder may be
    None, which drops its term."""
    total = x.new_zeros(())
    for enc, target in ((E_y, y_targets), (E_u, u_targets)):
        if enc is None:
            continue
        out = enc(x)
        if out.shape != target.shape:
            raise ValueError(f"encoder output {tuple(out.shape)} does not match target {tuple(target.shape)}")
        total = total + (out - target).pow(2).sum(dim=1).mean()
    return total


def amortized_reconstruction(x, bundle, x_corr=None):
    """G(E_y(x), E_c(x_corr), E_u(x)) with ``x_corr`` defaulting to ``x``."""
    if bundle.Ey is None or bundle.Eu is None:
        raise ValueError("amortized reconstruction needs E_y and E_u; run stage 2 first")
    c_vec = None
    if bundle.Ec is not None:
        c_vec = bundle.Ec(x if x_corr is None else x_corr)
    return generate(bundle.Ey(x), c_vec, bundle.Eu(x), bundle.G)


def generation_loss(x, bundle, cfg: FeatureLossConfig = FeatureLossConfig(), x_corr=None):
    return reconstruction_loss(amortized_reconstruction(x, bundle, x_corr), x, cfg)


def adversarial_losses(real_logits, fake_logits):
    """(loss_D, loss_G) in softplus form: D maximizes log D(x) + log(1 - D(x_bar)),
    G uses the non-saturating objective."""
    loss_d = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    loss_g = F.softplus(-fake_logits).mean()
    return loss_d, loss_g


def r1_penalty(D, real):
    """Mean squared norm of the gradient of D's logit with respect to its input."""
    real = real.detach().requires_grad_(True)
    out = D(real)
    (grad,) = torch.autograd.grad(out.sum(), real, create_graph=True)
    return grad.pow(2).flatten(1).sum(dim=1).mean()


def discriminator_loss(D, real, fake, weights: LossWeights):
    """Maximizer side: loss_D plus gamma/2 * R1 on real images when gamma > 0."""
    loss_d, _ = adversarial_losses(D(real), D(fake.detach()))
    terms = {"loss_D": loss_d}
    total = loss_d
    if weights.r1_gamma > 0:
        r1 = r1_penalty(D, real)
        terms["r1"] = r1
        total = total + weights.r1_gamma / 2 * r1
    terms["d_total"] = total
    return total, terms


def generator_side(x, bundle, y_targets, u_targets, weights: LossWeights,
                   cfg: FeatureLossConfig = FeatureLossConfig(), x_corr=None, x_hat=None):
    """Minimizer side: L_gen + lambda_enc * L_enc + lambda_adv * loss_G."""
    if x_hat is None:
        x_hat = amortized_reconstruction(x, bundle, x_corr)
    gen = reconstruction_loss(x_hat, x, cfg)
    enc = encoder_distillation_loss(x, y_targets, u_targets, bundle.Ey, bundle.Eu)
    total = gen + weights.lambda_enc * enc
    terms = {"gen": gen, "enc": enc}
    if weights.lambda_adv > 0:
        loss_g = F.softplus(-bundle.D(x_hat)).mean()
        terms["loss_G"] = loss_g
        total = total + weights.lambda_adv * loss_g
    terms["g_total"] = total
    return total, terms


def synthesis_objective(x, bundle, y_targets, u_targets, weights: LossWeights,
                        cfg: FeatureLossConfig = FeatureLossConfig(), x_corr=None):
    """Both sides of the stage-2 game from one amortized reconstruction.

    Returns ``(minimizer_total, maximizer_total, breakdown)``. The maximizer
    side is None when ``lambda_adv`` is 0 or the bundle has no discriminator.
    """
    x_hat = amortized_reconstruction(x, bundle, x_corr)
    g_total, terms = generator_side(x, bundle, y_targets, u_targets, weights, cfg, x_hat=x_hat)
    d_total = None
    if weights.lambda_adv > 0 and bundle.D is not None:
        d_total, d_terms = discriminator_loss(bundle.D, x, x_hat, weights)
        terms.update(d_terms)
    return g_total, d_total, terms
