"""Line-oriented ``key = value`` run configuration with dotted namespaces."""

from __future__ import annotations

from pathlib import Path

from .losses import FeatureLossConfig, LossWeights
from .nets import ArchConfig
from .synth import default_spec
from .transforms import SpatialConfig, TransformMode

__all__ = ["ConfigError", "RunConfig", "DEFAULTS", "parse_config", "parse_config_text"]

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.source": "synthetic",
    "data.n_train": 2000,
    "data.n_eval": 500,
    "data.size": 32,
    "data.classes": 3,
    "data.corr_values": 6,
    "data.masks": False,
    "data.image_dir": "",
    "data.labels_file": "",
    "data.masks_dir": "",
    "data.eval_frac": 0.2,
    "t.mode": "random_spatial",
    "t.flip_prob": 0.5,
    "t.max_angle": 30.0,
    "t.crop_min": 0.7,
    "lr.latent": 0.01,
    "lr.generator": 0.001,
    "lr.encoder": 0.0001,
    "lr.stage2": 0.0001,
    "train.epochs_stage1": 200,
    "train.epochs_stage2": 100,
    "train.batch_size": 32,
    "train.stage2_input": "raw_x",
    "train.ey_in_stage1": False,
    "train.log_every": 10,
    "train.checkpoint_every": 0,
    "train.probe_curve": False,
    "loss.kind": "multiscale_l1",
    "loss.scale_weights": (1 / 3, 1 / 3, 1 / 3),
    "loss.feature_seed": 0,
    "loss.lambda_b": 0.001,
    "loss.lambda_enc": 10.0,
    "loss.lambda_adv": 1.0,
    "loss.r1_gamma": 1.0,
    "loss.noise_std": 1.0,
    "latent.d_u": 16,
    "latent.d_y": 32,
    "latent.d_c": 16,
    "latent.init_std": 0.05,
    "latent.init_std_y": 0.05,
    "latent.optimizer": "row",
    "arch.base_channels": 32,
    "arch.num_scales": 4,
    "eval.refs_per_source": 10,
    "eval.probe_hidden": 128,
    "eval.probe_epochs": 200,
    "eval.oracle_n": 30000,
    "eval.oracle_epochs": 40,
    "eval.oracle_strict": True,
    "eval.t_mode": "identity",
}

_CHOICES = {
    "data.source": ("synthetic", "folder"),
    "t.mode": tuple(m.value for m in TransformMode),
    "eval.t_mode": tuple(m.value for m in TransformMode),
    "train.stage2_input": ("raw_x", "transformed_x"),
    "latent.optimizer": ("row", "dense"),
    "loss.kind": ("pixel_l1", "multiscale_l1", "fixed_random_features"),
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if key in _CHOICES and raw not in _CHOICES[key]:
        raise ValueError(f"expected one of {', '.join(_CHOICES[key])}, got {raw!r}")
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved configuration: every key in :data:`DEFAULTS`, nothing else."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def with_overrides(self, **dotted) -> "RunConfig":
        merged = dict(self.values)
        for key, value in dotted.items():
            key = key.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            merged[key] = value
        return RunConfig(merged)

    def snapshot(self) -> str:
        return "".join(f"{key} = {_format_value(self.values[key])}\n" for key in DEFAULTS)

    def write_snapshot(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.snapshot(), encoding="utf-8")

    def spatial_config(self) -> SpatialConfig:
        return SpatialConfig(flip_prob=self["t.flip_prob"], max_angle=self["t.max_angle"],
                             crop_min=self["t.crop_min"])

    def correlation_spec(self):
        return default_spec(self["data.classes"], self["data.corr_values"])

    def train_config(self):
        from .trainer import TrainConfig

        return TrainConfig(
            lr_latent=self["lr.latent"],
            lr_generator=self["lr.generator"],
            lr_encoder=self["lr.encoder"],
            lr_stage2=self["lr.stage2"],
            epochs_stage1=self["train.epochs_stage1"],
            epochs_stage2=self["train.epochs_stage2"],
            batch_size=self["train.batch_size"],
            weights=LossWeights(self["loss.lambda_b"], self["loss.lambda_enc"],
                                self["loss.lambda_adv"], self["loss.r1_gamma"]),
            noise_std=self["loss.noise_std"],
            t_mode=self["t.mode"],
            t_config=self.spatial_config(),
            seed=self["seed"],
            stage2_input_mode=self["train.stage2_input"],
            ey_in_stage1=self["train.ey_in_stage1"],
            loss=FeatureLossConfig(self["loss.kind"], self["loss.scale_weights"], self["loss.feature_seed"]),
            d_y=self["latent.d_y"],
            d_c=self["latent.d_c"],
            d_u=self["latent.d_u"],
            init_std=self["latent.init_std"],
            init_std_y=self["latent.init_std_y"],
            arch=ArchConfig(self["arch.base_channels"], self["arch.num_scales"]),
            log_every=self["train.log_every"],
            checkpoint_every=self["train.checkpoint_every"],
            latent_optimizer=self["latent.optimizer"],
            probe_curve=self["train.probe_curve"],
            probe_hidden=self["eval.probe_hidden"],
            probe_epochs=self["eval.probe_epochs"],
        )


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return RunConfig(values)


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))
