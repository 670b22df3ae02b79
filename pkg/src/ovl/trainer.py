"""Stage 1 (latent optimization), stage 2 (amortized adversarial synthesis),
ablation variants and inference-time translation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .latents import LatentBank, RowAdam, init_bank
from .losses import (
    FeatureLossConfig,
    LossWeights,
    amortized_reconstruction,
    discriminator_loss,
    disentanglement_objective,
    generator_side,
)
from .nets import ArchConfig, Dims, Encoder, ModelBundle, Discriminator, generate
from .transforms import SpatialConfig, TransformMode, transform_batch

__all__ = [
    "TrainConfig",
    "RunArtifacts",
    "TrainingDivergedError",
    "train_stage1",
    "train_stage2",
    "train_amortized_ablation",
    "train_no_xcorr_ablation",
    "translate",
    "reconstruct",
    "VARIANTS",
]

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_xcorr", "amortized")
ADAM_BETAS = (0.9, 0.999)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_latent: float = 0.01
    lr_generator: float = 0.001
    lr_encoder: float = 0.0001
    lr_stage2: float = 0.0001
    epochs_stage1: int = 200
    epochs_stage2: int = 100
    batch_size: int = 32
    weights: LossWeights = LossWeights()
    noise_std: float = 1.0
    t_mode: str = "random_spatial"
    t_config: SpatialConfig = SpatialConfig()
    seed: int = 0
    stage2_input_mode: str = "raw_x"
    ey_in_stage1: bool = False
    loss: FeatureLossConfig = FeatureLossConfig()
    d_y: int = 32
    d_c: int = 16
    d_u: int = 16
    init_std: float = 0.05
    init_std_y: float = 0.05
    arch: ArchConfig = ArchConfig()
    log_every: int = 10
    checkpoint_every: int = 0
    latent_optimizer: str = "row"
    probe_curve: bool = False
    probe_hidden: int = 128
    probe_epochs: int = 200

    def __post_init__(self):
        for name in ("lr_latent", "lr_generator", "lr_encoder", "lr_stage2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        TransformMode(self.t_mode)
        if self.stage2_input_mode not in ("raw_x", "transformed_x"):
            raise ValueError("stage2_input_mode must be raw_x or transformed_x")
        if self.latent_optimizer not in ("row", "dense"):
            raise ValueError("latent_optimizer must be row or dense")


@dataclass
class RunArtifacts:
    bank: LatentBank
    bundle: ModelBundle
    config: TrainConfig
    stage: str = "stage1"
    variant: str = "full"
    loss_log: Path | None = None
    history: list = field(default_factory=list)
    curve: list = field(default_factory=list)
    step_counts: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)


class _LossLog:
    def __init__(self, path: Path | None, every: int):
        self.path = path
        self.every = max(1, every)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, step: int, terms: dict, prefix: str):
        if self.path is None or step % self.every:
            return
        with self.path.open("a", encoding="utf-8") as fh:
            for name, value in terms.items():
                fh.write(f"{step}\t{prefix}{name}\t{float(value):.9g}\n")


def _streams(seed: int, stage: int):
    seq = np.random.SeedSequence([seed, stage])
    order, trans, bank, noise = seq.spawn(4)
    noise_gen = torch.Generator().manual_seed(int(noise.generate_state(1, dtype=np.uint64)[0] >> 1))
    return np.random.default_rng(order), np.random.default_rng(trans), np.random.default_rng(bank), noise_gen


def _as_nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.array(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def _check_dataset(dataset, config: TrainConfig, needs_masks: bool):
    H, W, C = dataset.shape
    if H != config.arch.resolution or W != config.arch.resolution:
        raise ValueError(
            f"images are {H}x{W} but arch.num_scales={config.arch.num_scales} gives {config.arch.resolution}"
        )
    if needs_masks and dataset.masks is None:
        raise ValueError("t_mode=mask requires a dataset with masks")


def _check_finite(step: int, terms: dict, stage: str):
    for name, value in terms.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise TrainingDivergedError(f"{stage}: non-finite loss at step {step} in term '{name}'")


def _batches(order_rng, N, batch_size):
    perm = order_rng.permutation(N)
    for start in range(0, N, batch_size):
        yield perm[start : start + batch_size]


def _probe_accuracy(codes: torch.Tensor, labels, config: TrainConfig) -> float:
    from .evaluation import train_probe

    rng = np.random.default_rng([config.seed, 99])
    _, acc = train_probe(codes.detach().numpy(), np.asarray(labels), 0.2, rng,
                         hidden=config.probe_hidden, epochs=config.probe_epochs)
    return acc


@torch.no_grad()
def _encode_all(encoder, images: torch.Tensor, batch: int = 256) -> torch.Tensor:
    was_training = encoder.training
    encoder.eval()
    out = torch.cat([encoder(images[i : i + batch]) for i in range(0, len(images), batch)])
    encoder.train(was_training)
    return out


def _save(artifacts: RunArtifacts, out_dir):
    from .checkpoint import save_checkpoint

    save_checkpoint(artifacts, out_dir)


class _DenseLatentAdam:
    """Plain Adam over the whole table; rows outside the batch keep moving
    on their momentum."""

    def __init__(self, param, lr):
        self.param = param
        self.opt = torch.optim.Adam([param], lr=lr, betas=ADAM_BETAS, eps=1e-8)

    def step(self, rows):
        self.opt.step()

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=True)


def _latent_optimizer(param, config: TrainConfig):
    if config.latent_optimizer == "row":
        return RowAdam(param, config.lr_latent, ADAM_BETAS)
    return _DenseLatentAdam(param, config.lr_latent)


def train_stage1(dataset, config: TrainConfig, out_dir=None, variant: str = "full") -> RunArtifacts:
    """Minimize the stage-1 objective with one optimizer step per parameter
    group per minibatch. ``variant`` selects the ablations: ``no_xcorr`` drops
    E_c, ``amortized`` replaces the per-image codes with an encoder."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    mode = TransformMode(config.t_mode)
    _check_dataset(dataset, config, needs_masks=mode is TransformMode.mask and variant != "no_xcorr")
    order_rng, t_rng, bank_rng, noise_gen = _streams(config.seed, 1)
    torch.manual_seed(config.seed)

    N = len(dataset)
    H, W, C = dataset.shape
    K = dataset.num_classes
    dims = Dims(config.d_y, 0 if variant == "no_xcorr" else config.d_c, config.d_u, H, W, C)
    networks = ["G", "Ec"]
    if config.ey_in_stage1:
        networks.append("Ey")
    if variant == "amortized":
        networks.append("Eu")
    bundle = ModelBundle.build(config.arch, dims, networks)
    bank = init_bank(N, config.d_u, K, config.d_y, bank_rng, config.init_std, config.init_std_y)
    bank.requires_grad_(True)

    lrs = {"G": config.lr_generator, "Ec": config.lr_encoder, "Ey": config.lr_encoder, "Eu": config.lr_encoder}
    optims = {name: torch.optim.Adam(net.parameters(), lr=lrs[name], betas=ADAM_BETAS, eps=1e-8)
              for name, net in bundle.networks().items()}
    row_optims = {}
    if variant != "amortized":
        row_optims["u_prime"] = _latent_optimizer(bank.u_prime, config)
    if not config.ey_in_stage1:
        row_optims["y_embed"] = _latent_optimizer(bank.y_embed, config)

    images = _as_nchw(dataset.images)
    masks = torch.from_numpy(np.array(dataset.masks)) if dataset.masks is not None else None
    labels = torch.from_numpy(np.array(dataset.labels))
    out_dir = Path(out_dir) if out_dir is not None else None
    loss_log = _LossLog(out_dir / "loss.log" if out_dir else None, config.log_every)
    artifacts = RunArtifacts(bank, bundle, config, "stage1", variant,
                             loss_log=loss_log.path, step_counts={k: 0 for k in [*optims, *row_optims]})

    def probe_codes():
        if variant == "amortized":
            return _encode_all(bundle.Eu, images)
        return bank.u_prime.detach()

    if config.probe_curve:
        artifacts.curve.append((0, _probe_accuracy(probe_codes(), labels, config)))

    step = 0
    for epoch in range(config.epochs_stage1):
        for idx in _batches(order_rng, N, config.batch_size):
            idx_t = torch.from_numpy(idx)
            batch = {"x": images[idx_t], "labels": labels[idx_t], "index": idx_t}
            if masks is not None:
                batch["masks"] = masks[idx_t]
            total, terms = disentanglement_objective(
                batch, bank, bundle.G, bundle.Ec, config.weights, noise_gen, config.loss,
                config.noise_std, mode, t_rng, config.t_config,
                E_u=bundle.Eu, E_y=bundle.Ey,
            )
            _check_finite(step, terms, "stage1")
            for opt in optims.values():
                opt.zero_grad(set_to_none=True)
            for opt in row_optims.values():
                opt.zero_grad()
            total.backward()
            for name, opt in optims.items():
                opt.step()
                artifacts.step_counts[name] += 1
            if "u_prime" in row_optims:
                row_optims["u_prime"].step(idx_t)
                artifacts.step_counts["u_prime"] += 1
            if "y_embed" in row_optims:
                row_optims["y_embed"].step(torch.unique(batch["labels"]))
                artifacts.step_counts["y_embed"] += 1
            record = {k: float(v.detach()) for k, v in terms.items()}
            artifacts.history.append(record)
            loss_log.write(step, record, "stage1/")
            step += 1
            if out_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
                _save(artifacts, out_dir)
        if config.probe_curve:
            artifacts.curve.append((epoch + 1, _probe_accuracy(probe_codes(), labels, config)))
        log.info("stage1 epoch %d/%d rec=%.4f", epoch + 1, config.epochs_stage1, artifacts.history[-1]["rec"])

    bank.requires_grad_(False)
    bundle.eval()
    if out_dir:
        _save(artifacts, out_dir)
    return artifacts


def train_amortized_ablation(dataset, config: TrainConfig, out_dir=None) -> RunArtifacts:
    """Stage 1 with an encoder producing the uncorrelated codes; records the
    per-epoch label-probe curve on the encoder outputs."""
    return train_stage1(dataset, replace(config, probe_curve=True), out_dir, variant="amortized")


def train_no_xcorr_ablation(dataset, config: TrainConfig, out_dir=None) -> RunArtifacts:
    return train_stage1(dataset, config, out_dir, variant="no_xcorr")


def train_stage2(stage1: RunArtifacts, dataset, config: TrainConfig | None = None, out_dir=None) -> RunArtifacts:
    """Distill stage-1 codes into E_y / E_u while fine-tuning G and E_c,
    alternating one discriminator step and one generator/encoder step."""
    if stage1.variant == "amortized":
        raise ValueError("stage 2 distills latent-optimized codes; the amortized ablation has none")
    config = config or stage1.config
    if len(dataset) != stage1.bank.N:
        raise ValueError(f"dataset has {len(dataset)} images, stage-1 bank has {stage1.bank.N} rows")
    mode = TransformMode(config.t_mode)
    use_t = config.stage2_input_mode == "transformed_x"
    _check_dataset(dataset, config, needs_masks=use_t and mode is TransformMode.mask)
    order_rng, t_rng, _, _ = _streams(config.seed, 2)
    torch.manual_seed(config.seed + 1)

    bank = stage1.bank
    bank_checksum = bank.checksum()
    bundle = stage1.bundle.copy()
    arch, dims = bundle.arch, bundle.dims
    images = _as_nchw(dataset.images)
    labels = torch.from_numpy(np.array(dataset.labels))
    masks = torch.from_numpy(np.array(dataset.masks)) if dataset.masks is not None else None

    if bundle.Ey is not None:
        y_targets_all = _encode_all(bundle.Ey, images)
    else:
        y_targets_all = bank.y_embed.detach()[labels].clone()
        bundle.Ey = Encoder(arch, dims.d_y, dims.C)
    u_targets_all = bank.u_prime.detach().clone()
    bundle.Eu = Encoder(arch, dims.d_u, dims.C)
    adversarial = config.weights.lambda_adv > 0
    if adversarial:
        bundle.D = Discriminator(arch, dims.C)
    for net in bundle.networks().values():
        net.train()

    ge_params = [p for name, net in bundle.networks().items() if name != "D" for p in net.parameters()]
    opt_ge = torch.optim.Adam(ge_params, lr=config.lr_stage2, betas=ADAM_BETAS, eps=1e-8)
    opt_d = torch.optim.Adam(bundle.D.parameters(), lr=config.lr_stage2, betas=ADAM_BETAS, eps=1e-8) if adversarial else None

    out_dir = Path(out_dir) if out_dir is not None else None
    loss_log = _LossLog(out_dir / "loss.log" if out_dir else None, config.log_every)
    artifacts = RunArtifacts(bank, bundle, config, "stage2", stage1.variant, loss_log=loss_log.path,
                             step_counts={"GE": 0, **({"D": 0} if adversarial else {})},
                             provenance=dict(stage1.provenance))
    artifacts.provenance["stage1_bank_sha256"] = bank_checksum

    step = 0
    for epoch in range(config.epochs_stage2):
        for idx in _batches(order_rng, len(dataset), config.batch_size):
            idx_t = torch.from_numpy(idx)
            x = images[idx_t]
            x_corr = None
            if use_t:
                x_corr = transform_batch(x, mode, t_rng, config.t_config, None if masks is None else masks[idx_t])
            x_hat = amortized_reconstruction(x, bundle, x_corr)
            record = {}
            if adversarial:
                d_total, d_terms = discriminator_loss(bundle.D, x, x_hat.detach(), config.weights)
                _check_finite(step, d_terms, "stage2")
                opt_d.zero_grad(set_to_none=True)
                d_total.backward()
                opt_d.step()
                artifacts.step_counts["D"] += 1
                record.update({k: float(v.detach()) for k, v in d_terms.items()})
            g_total, g_terms = generator_side(x, bundle, y_targets_all[idx_t], u_targets_all[idx_t],
                                              config.weights, config.loss, x_hat=x_hat)
            _check_finite(step, g_terms, "stage2")
            opt_ge.zero_grad(set_to_none=True)
            g_total.backward()
            opt_ge.step()
            artifacts.step_counts["GE"] += 1
            record.update({k: float(v.detach()) for k, v in g_terms.items()})
            artifacts.history.append(record)
            loss_log.write(step, record, "stage2/")
            step += 1
            if out_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
                _save(artifacts, out_dir)
        log.info("stage2 epoch %d/%d gen=%.4f enc=%.4f", epoch + 1, config.epochs_stage2,
                 artifacts.history[-1]["gen"], artifacts.history[-1]["enc"])

    if bank.checksum() != bank_checksum:
        raise RuntimeError("stage 2 modified the stage-1 latent bank")
    bundle.eval()
    if out_dir:
        _save(artifacts, out_dir)
    return artifacts


@torch.no_grad()
def reconstruct(x: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    return amortized_reconstruction(x, bundle)


@torch.no_grad()
def translate(x_source: torch.Tensor, reference: torch.Tensor, bundle: ModelBundle,
              t_mode="identity", reference_labels=None, y_embed: torch.Tensor | None = None,
              t_rng: np.random.Generator | None = None, t_config: SpatialConfig = SpatialConfig(),
              reference_masks=None) -> torch.Tensor:
    """G(y_ref, E_c(T(reference)), E_u(source)).

    ``y_ref`` is the class row of ``y_embed`` when ``reference_labels`` and
    ``y_embed`` are given, otherwise ``E_y(reference)``.
    """
    if bundle.Eu is None or (bundle.Ey is None and y_embed is None):
        raise ValueError("translation needs E_u and E_y from stage 2; run `train stage2` first")
    if reference_labels is not None and y_embed is not None:
        y_vec = y_embed[torch.as_tensor(reference_labels, dtype=torch.int64)]
    else:
        y_vec = bundle.Ey(reference)
    c_vec = None
    if bundle.Ec is not None:
        c_vec = bundle.Ec(transform_batch(reference, t_mode, t_rng, t_config, reference_masks))
    return generate(y_vec, c_vec, bundle.Eu(x_source), bundle.G)
