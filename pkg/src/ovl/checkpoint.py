"""Binary containers: dataset cache (OVLD), latent bank (OVLB), models (OVLM).

All numbers are little-endian. Loaders validate magic, dimensions and length
and raise :class:`CheckpointError` naming the offending block; nothing is
returned from a partially read file.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .latents import LatentBank
from .nets import ArchConfig, Dims, ModelBundle
from .synth import Dataset, FactorTuple

__all__ = [
    "CheckpointError",
    "save_dataset",
    "load_dataset",
    "save_bank",
    "load_bank",
    "write_ovlm",
    "read_ovlm",
    "save_bundle",
    "load_bundle",
    "file_sha256",
    "save_checkpoint",
    "load_checkpoint",
    "save_oracles",
    "load_oracles",
]

DATASET_MAGIC = b"OVLD0001".ljust(16, b"\0")
BANK_MAGIC = b"OVLB0001"
MODEL_MAGIC = b"OVLM0001"


class CheckpointError(ValueError):
    pass


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, block: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated while reading block '{block}'")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, block: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), block))

    def array(self, dtype: str, shape, block: str) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * np.dtype(dtype).itemsize, block)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    def done(self):
        if self.pos != len(self.data):
            raise CheckpointError(f"{self.path}: {len(self.data) - self.pos} unexpected trailing bytes")


def _atomic_write(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# dataset cache --------------------------------------------------------------

_FACTOR_DTYPE = np.dtype([("y", "<i4"), ("corr", "<i4"), ("dx", "<f4"), ("dy", "<f4"),
                          ("theta", "<f4"), ("scale", "<f4")])


def save_dataset(dataset: Dataset, path):
    N, H, W, C = dataset.images.shape
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<5I", N, H, W, C, dataset.num_classes))
    buf.write(dataset.images.astype("<f4").tobytes())
    buf.write(dataset.labels.astype("<i4").tobytes())
    buf.write(struct.pack("<B", dataset.masks is not None))
    if dataset.masks is not None:
        buf.write(dataset.masks.astype(np.uint8).tobytes())
    buf.write(struct.pack("<B", dataset.factors is not None))
    if dataset.factors is not None:
        rec = np.array([(f.y, f.corr, f.dx, f.dy, f.theta, f.scale) for f in dataset.factors],
                       dtype=_FACTOR_DTYPE)
        buf.write(rec.tobytes())
    _atomic_write(path, buf.getvalue())


def load_dataset(path) -> Dataset:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(16, "magic") != DATASET_MAGIC:
        raise CheckpointError(f"{path}: bad magic in block 'magic', not a dataset cache")
    N, H, W, C, K = r.unpack("<5I", "dims")
    images = r.array("<f4", (N, H, W, C), "images")
    labels = r.array("<i4", (N,), "labels")
    masks = None
    if r.unpack("<B", "masks_flag")[0]:
        masks = r.array("u1", (N, H, W), "masks")
    factors = None
    if r.unpack("<B", "factors_flag")[0]:
        rec = r.array(_FACTOR_DTYPE, (N,), "factors")
        factors = tuple(
            FactorTuple(int(f["y"]), int(f["corr"]), float(f["dx"]), float(f["dy"]),
                        float(f["theta"]), float(f["scale"]))
            for f in rec
        )
    r.done()
    return Dataset(images=images, labels=labels, masks=masks, factors=factors, num_classes=K)


# latent bank ----------------------------------------------------------------

def save_bank(bank: LatentBank, path):
    buf = io.BytesIO()
    buf.write(BANK_MAGIC)
    buf.write(struct.pack("<4I", bank.N, bank.d_u, bank.K, bank.d_y))
    buf.write(bank.u_prime.detach().cpu().numpy().astype("<f4").tobytes())
    buf.write(bank.y_embed.detach().cpu().numpy().astype("<f4").tobytes())
    _atomic_write(path, buf.getvalue())


def load_bank(path, expect: tuple[int, int, int, int] | None = None) -> LatentBank:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(8, "magic") != BANK_MAGIC:
        raise CheckpointError(f"{path}: bad magic in block 'magic', not a latent bank")
    N, d_u, K, d_y = r.unpack("<4I", "dims")
    if expect is not None and (N, d_u, K, d_y) != tuple(expect):
        raise CheckpointError(f"{path}: block 'dims' is {(N, d_u, K, d_y)}, expected {tuple(expect)}")
    u = r.array("<f4", (N, d_u), "u_prime")
    y = r.array("<f4", (K, d_y), "y_embed")
    r.done()
    return LatentBank(torch.from_numpy(u.astype(np.float32)), torch.from_numpy(y.astype(np.float32)))


# model container ------------------------------------------------------------

def write_ovlm(path, echo: dict, blocks):
    """``echo`` is a flat str->str dict; ``blocks`` an iterable of (name, array)."""
    text = "".join(f"{k}={v}\n" for k, v in echo.items()).encode("utf-8")
    blocks = list(blocks)
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(blocks)))
    for name, value in blocks:
        arr = np.asarray(value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else value)
        arr = arr.astype("<f4")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    _atomic_write(path, buf.getvalue())


def read_ovlm(path) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(8, "magic") != MODEL_MAGIC:
        raise CheckpointError(f"{path}: bad magic in block 'magic', not a model checkpoint")
    (n,) = r.unpack("<I", "arch_config")
    text = r.take(n, "arch_config").decode("utf-8")
    echo = dict(line.split("=", 1) for line in text.splitlines() if line)
    (count,) = r.unpack("<I", "block_count")
    blocks = {}
    for i in range(count):
        (ln,) = r.unpack("<H", f"block #{i} name")
        name = r.take(ln, f"block #{i} name").decode("utf-8")
        (ndim,) = r.unpack("<B", name)
        shape = r.unpack(f"<{ndim}I", name)
        blocks[name] = r.array("<f4", shape, name)
    r.done()
    return echo, blocks


def save_bundle(bundle: ModelBundle, path, extra: dict | None = None):
    d, a = bundle.dims, bundle.arch
    echo = {
        "base_channels": a.base_channels,
        "num_scales": a.num_scales,
        "d_y": d.d_y, "d_c": d.d_c, "d_u": d.d_u, "H": d.H, "W": d.W, "C": d.C,
        "networks": ",".join(bundle.networks()),
    }
    echo.update(extra or {})
    write_ovlm(path, echo, bundle.named_blocks())


def load_bundle(path) -> tuple[ModelBundle, dict]:
    echo, blocks = read_ovlm(path)
    try:
        arch = ArchConfig(int(echo["base_channels"]), int(echo["num_scales"]))
        dims = Dims(*(int(echo[k]) for k in ("d_y", "d_c", "d_u", "H", "W", "C")))
        names = [n for n in echo["networks"].split(",") if n]
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: block 'arch_config' is malformed ({exc})") from None
    bundle = ModelBundle.build(arch, dims, names)
    expected = dict(bundle.named_blocks())
    for name in expected:
        if name not in blocks:
            raise CheckpointError(f"{path}: missing block '{name}'")
    for name, arr in blocks.items():
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected block '{name}'")
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise CheckpointError(
                f"{path}: block '{name}' has shape {tuple(arr.shape)}, expected {tuple(expected[name].shape)}"
            )
    for net_name, net in bundle.networks().items():
        prefix = net_name + "."
        state = {k[len(prefix):]: torch.from_numpy(v) for k, v in blocks.items() if k.startswith(prefix)}
        net.load_state_dict(state)
    return bundle, echo


# run directories --------------------------------------------------------------

def save_checkpoint(artifacts, run_dir):
    """Write ``stage1/latents.ovlb`` + ``stage1/model.ovlm`` or ``stage2/model.ovlm``."""
    run_dir = Path(run_dir)
    stage_dir = run_dir / artifacts.stage
    extra = {"stage": artifacts.stage, "variant": artifacts.variant}
    if artifacts.stage == "stage1":
        save_bank(artifacts.bank, stage_dir / "latents.ovlb")
    else:
        extra.update({f"provenance.{k}": v for k, v in sorted(artifacts.provenance.items())})
    save_bundle(artifacts.bundle, stage_dir / "model.ovlm", extra)


def load_checkpoint(run_dir, stage: str | None = None):
    """Load the latest (or the named) stage of a run directory.

    The latent bank always comes from ``stage1/latents.ovlb``; the training
    config from ``config.snapshot`` when present.
    """
    from .config import parse_config
    from .trainer import RunArtifacts, TrainConfig

    run_dir = Path(run_dir)
    if stage is None:
        stage = "stage2" if (run_dir / "stage2" / "model.ovlm").exists() else "stage1"
    model_path = run_dir / stage / "model.ovlm"
    bank_path = run_dir / "stage1" / "latents.ovlb"
    for p in (model_path, bank_path):
        if not p.exists():
            raise CheckpointError(f"missing checkpoint file {p}")
    bundle, echo = load_bundle(model_path)
    bank = load_bank(bank_path)
    if bank.d_u != bundle.dims.d_u or bank.d_y != bundle.dims.d_y:
        raise CheckpointError(f"{bank_path}: block 'dims' does not match {model_path}")
    snapshot = run_dir / "config.snapshot"
    config = parse_config(snapshot).train_config() if snapshot.exists() else TrainConfig()
    provenance = {k[len("provenance."):]: v for k, v in echo.items() if k.startswith("provenance.")}
    bundle.eval()
    return RunArtifacts(bank=bank, bundle=bundle, config=config, stage=echo.get("stage", stage),
                        variant=echo.get("variant", "full"), provenance=provenance)


# oracles --------------------------------------------------------------------

def save_oracles(oracles, path):
    y_out = oracles.y_classifier.out.out_features
    corr_out = oracles.corr_classifier.out.out_features
    pose_out = oracles.pose_regressor.out.out_features
    echo = {"y_classes": y_out, "corr_classes": corr_out, "pose_dims": pose_out,
            "resolution": oracles.y_classifier.encoder.trunk.resolution}
    echo.update({f"score.{k}": repr(float(v)) for k, v in sorted(oracles.scores.items())})
    write_ovlm(path, echo, oracles.named_blocks())


def load_oracles(path):
    from .evaluation import Oracles, oracle_arch
    from .nets import ConvClassifier

    echo, blocks = read_ovlm(path)
    try:
        sizes = {k: int(echo[k]) for k in ("y_classes", "corr_classes", "pose_dims", "resolution")}
        arch = oracle_arch(sizes["resolution"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: block 'arch_config' is malformed ({exc})") from None
    nets = {
        "y_classifier": ConvClassifier(arch, sizes["y_classes"]),
        "corr_classifier": ConvClassifier(arch, sizes["corr_classes"]),
        "pose_regressor": ConvClassifier(arch, sizes["pose_dims"]),
    }
    for name, net in nets.items():
        prefix = name + "."
        state = {k[len(prefix):]: torch.from_numpy(v) for k, v in blocks.items() if k.startswith(prefix)}
        try:
            net.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: block group '{name}' does not fit ({exc})") from None
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
    for name in ("pose_mean", "pose_std"):
        if name not in blocks:
            raise CheckpointError(f"{path}: missing block '{name}'")
    scores = {k[len("score."):]: float(v) for k, v in echo.items() if k.startswith("score.")}
    return Oracles(nets["y_classifier"], nets["corr_classifier"], nets["pose_regressor"],
                   blocks["pose_mean"].astype(np.float64), blocks["pose_std"].astype(np.float64), scores)
