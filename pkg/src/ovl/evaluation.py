"""Disentanglement and fidelity metrics, plus frozen ground-truth oracles for
the synthetic benchmark.

Desk-scale substitutes: the Frechet distance and the diversity score are
computed on the penultimate features of a frozen oracle classifier, so only
orderings between runs are meaningful.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.spatial.distance import pdist

from .nets import ArchConfig, ConvClassifier
from .transforms import SpatialConfig, sample_spatial_params, spatial_transform

__all__ = [
    "Probe",
    "EvalReport",
    "Oracles",
    "OracleTrainingError",
    "train_probe",
    "pose_regression_probe",
    "pose_error",
    "source_leakage_accuracy",
    "frechet_from_moments",
    "frechet_distance",
    "desk_fid",
    "diversity_score",
    "fit_oracles",
    "full_report",
]

ORACLE_WIDTH = 16


def oracle_arch(resolution: int) -> ArchConfig:
    """Conv template shared by the oracles and the leakage classifier."""
    scales = int(round(np.log2(resolution / 4))) + 1
    if scales < 1 or 4 * 2 ** (scales - 1) != resolution:
        raise ValueError(f"evaluation classifiers need a power-of-two resolution >= 4, got {resolution}")
    return ArchConfig(base_channels=ORACLE_WIDTH, num_scales=scales)

COV_EPS = 1e-6


class OracleTrainingError(RuntimeError):
    pass


def _torch_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2**62))


def _as_nchw(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images.float()
    arr = np.array(images, dtype=np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


class Probe(nn.Module):
    """Two-layer perceptron: one hidden ReLU layer, then class logits."""

    def __init__(self, in_dim: int, num_classes: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, num_classes))
        self.register_buffer("mean", torch.zeros(in_dim))
        self.register_buffer("scale", torch.ones(in_dim))

    def forward(self, codes):
        return self.net((codes - self.mean) / self.scale)


def train_probe(codes, labels, held_out_frac: float = 0.2, rng: np.random.Generator | None = None,
                hidden: int = 128, epochs: int = 200, batch_size: int = 64, lr: float = 1e-3):
    """Fit a probe on a random split and return ``(probe, held_out_accuracy)``.

    Codes are standardized with training-split statistics, so the recipe is
    insensitive to the overall code scale.
    """
    codes = np.asarray(codes, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("probe needs at least two classes")
    K = int(labels.max()) + 1
    if len(codes) < 10 * len(classes):
        raise ValueError(f"probe needs at least {10 * len(classes)} samples, got {len(codes)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    perm = rng.permutation(len(codes))
    n_test = max(1, int(round(len(codes) * held_out_frac)))
    test, train = perm[:n_test], perm[n_test:]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(_torch_seed(rng))
        probe = Probe(codes.shape[1], K, hidden)
        xtr = torch.from_numpy(codes[train])
        ytr = torch.from_numpy(labels[train])
        std = xtr.std(dim=0, unbiased=False)
        probe.mean.copy_(xtr.mean(dim=0))
        probe.scale.copy_(torch.where(std > 1e-8, std, torch.ones_like(std)))
        opt = torch.optim.Adam(probe.parameters(), lr=lr)
        for _ in range(epochs):
            order = torch.randperm(len(train))
            for s in range(0, len(train), batch_size):
                b = order[s : s + batch_size]
                loss = F.cross_entropy(probe(xtr[b]), ytr[b])
                opt.zero_grad()
                loss.backward()
                opt.step()
    probe.eval()
    with torch.no_grad():
        pred = probe(torch.from_numpy(codes[test])).argmax(dim=1).numpy()
    return probe, float((pred == labels[test]).mean())


def pose_error(pred, target, scale=None) -> float:
    """Mean over components of RMSE / std(target); components with zero
    spread are skipped. ``scale`` overrides the per-component std."""
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    scale = target.std(axis=0) if scale is None else np.asarray(scale, float)
    keep = scale > 1e-12
    rmse = np.sqrt(((pred - target) ** 2).mean(axis=0))
    return float((rmse[keep] / scale[keep]).mean())


def pose_regression_probe(codes, pose_gt) -> float:
    """Least-squares linear regression from codes to pose, scored in sample.
    1.0 means the codes carry no linear pose information."""
    codes = np.asarray(codes, float)
    pose_gt = np.asarray(pose_gt, float)
    X = np.hstack([codes, np.ones((len(codes), 1))])
    coef, *_ = np.linalg.lstsq(X, pose_gt, rcond=None)
    return pose_error(X @ coef, pose_gt)


def _fit_conv(images: torch.Tensor, targets: torch.Tensor, out_dim: int, rng: np.random.Generator,
              epochs: int, regression: bool = False, augment: SpatialConfig | None = None,
              arch: ArchConfig | None = None, lr: float = 1e-3, batch_size: int = 64,
              validate=None) -> ConvClassifier:
    """Train a ConvClassifier; ``validate(model, epoch)`` may return True to stop early."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(_torch_seed(rng))
        model = ConvClassifier(arch or oracle_arch(images.shape[-1]), out_dim)
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        for epoch in range(epochs):
            model.train()
            order = torch.from_numpy(rng.permutation(len(images)))
            for s in range(0, len(images), batch_size):
                b = order[s : s + batch_size]
                x = images[b]
                if augment is not None:
                    # half of each batch goes through the spatial transform
                    params = [sample_spatial_params(rng, augment) for _ in range(len(b) // 2)]
                    if params:
                        x = torch.cat([spatial_transform(x[: len(params)], params), x[len(params):]])
                out = model(x)
                loss = F.mse_loss(out, targets[b]) if regression else F.cross_entropy(out, targets[b])
                opt.zero_grad()
                loss.backward()
                opt.step()
            model.eval()
            if validate is not None and validate(model, epoch):
                break
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def _predict(model, images: torch.Tensor, batch: int = 500, fn=None) -> torch.Tensor:
    fn = fn or model
    return torch.cat([fn(images[i : i + batch]) for i in range(0, len(images), batch)])


def source_leakage_accuracy(translations, source_labels, target_labels, num_classes: int,
                            rng: np.random.Generator, held_out_frac: float = 0.2,
                            epochs: int = 8, max_samples: int = 4000):
    """Held-out accuracy of a conv classifier predicting the SOURCE class of
    each translation. Returns ``(accuracy, warnings)``."""
    images = _as_nchw(translations)
    src = np.asarray(source_labels, dtype=np.int64)
    tgt = np.asarray(target_labels, dtype=np.int64)
    notes = []
    pairs = set(zip(src.tolist(), tgt.tolist()))
    missing = [(s, t) for s in range(num_classes) for t in range(num_classes) if s != t and (s, t) not in pairs]
    if missing:
        notes.append(f"leakage: {len(missing)} ordered class pairs have no translations, e.g. {missing[0]}")
    idx = rng.permutation(len(images))[:max_samples]
    n_test = max(1, int(round(len(idx) * held_out_frac)))
    test, train = idx[:n_test], idx[n_test:]
    y = torch.from_numpy(src)
    model = _fit_conv(images[train], y[train], num_classes, rng, epochs)
    pred = _predict(model, images[test]).argmax(dim=1).numpy()
    return float((pred == src[test]).mean()), notes


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(A + B - 2 (A B)^(1/2)).

    The trace of the product's square root is taken from the symmetric matrix
    A^(1/2) B A^(1/2), which has the same eigenvalues as A B.
    """
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, float)), np.atleast_1d(np.asarray(mu_b, float))
    A, B = np.atleast_2d(np.asarray(cov_a, float)), np.atleast_2d(np.asarray(cov_b, float))
    if mu_a.shape != mu_b.shape or A.shape != B.shape or A.shape != (len(mu_a), len(mu_a)):
        raise ValueError("feature dimensions of the two distributions differ")
    w, V = np.linalg.eigh((A + A.T) / 2)
    sqrt_a = (V * np.sqrt(np.clip(w, 0, None))) @ V.T
    M = sqrt_a @ B @ sqrt_a
    m = np.linalg.eigvalsh((M + M.T) / 2)
    tr_sqrt = np.sqrt(np.clip(m, 0, None)).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(A) + np.trace(B) - 2 * tr_sqrt)
    return max(d, 0.0)


def frechet_distance(feats_a, feats_b, return_flag: bool = False):
    """Frechet distance between Gaussian fits of two feature sets.

    When either set has fewer than ``2 d`` rows, ``1e-6 I`` is added to both
    covariances and the result is flagged as regularized.
    """
    a, b = np.asarray(feats_a, float), np.asarray(feats_b, float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape} vs {b.shape}")
    d = a.shape[1]
    cov_a = np.cov(a, rowvar=False).reshape(d, d) if len(a) > 1 else np.zeros((d, d))
    cov_b = np.cov(b, rowvar=False).reshape(d, d) if len(b) > 1 else np.zeros((d, d))
    regularized = min(len(a), len(b)) < 2 * d
    if regularized:
        cov_a = cov_a + COV_EPS * np.eye(d)
        cov_b = cov_b + COV_EPS * np.eye(d)
    value = frechet_from_moments(a.mean(axis=0), cov_a, b.mean(axis=0), cov_b)
    return (value, regularized) if return_flag else value


def desk_fid(real_features, real_labels, gen_features, gen_labels, num_classes: int | None = None) -> dict:
    """Per-class Frechet distance between real images of each class and the
    translations into that class, plus the mean over classes."""
    real_labels, gen_labels = np.asarray(real_labels), np.asarray(gen_labels)
    K = num_classes or int(max(real_labels.max(), gen_labels.max())) + 1
    per_class, flags = {}, []
    for k in range(K):
        ra, gb = real_features[real_labels == k], gen_features[gen_labels == k]
        if len(ra) < 2 or len(gb) < 2:
            flags.append(f"desk_fid: class {k} has too few samples")
            continue
        value, reg = frechet_distance(ra, gb, return_flag=True)
        per_class[k] = value
        if reg:
            flags.append(f"desk_fid: class {k} covariance regularized (fewer than 2d samples)")
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return {"per_class": per_class, "mean": mean, "flags": flags}


def diversity_score(translation_sets, feature_extractor=None) -> float:
    """Mean over sets of the mean pairwise Euclidean distance between the
    features of one source's translations. Singleton sets are skipped."""
    scores = []
    skipped = 0
    for s in translation_sets:
        if len(s) < 2:
            skipped += 1
            continue
        feats = feature_extractor(s) if feature_extractor is not None else s
        feats = np.asarray(feats, dtype=np.float64).reshape(len(s), -1)
        scores.append(pdist(feats).mean())
    if skipped:
        warnings.warn(f"diversity_score: skipped {skipped} sets with fewer than two translations")
    if not scores:
        raise ValueError("diversity_score needs at least one set with two or more translations")
    return float(np.mean(scores))


@dataclass
class Oracles:
    """Frozen predictors of the ground-truth factors."""

    y_classifier: ConvClassifier
    corr_classifier: ConvClassifier
    pose_regressor: ConvClassifier
    pose_mean: np.ndarray
    pose_std: np.ndarray
    scores: dict = field(default_factory=dict)

    def predict_y(self, images) -> np.ndarray:
        return _predict(self.y_classifier, _as_nchw(images)).argmax(dim=1).numpy()

    def predict_corr(self, images) -> np.ndarray:
        return _predict(self.corr_classifier, _as_nchw(images)).argmax(dim=1).numpy()

    def predict_pose(self, images) -> np.ndarray:
        z = _predict(self.pose_regressor, _as_nchw(images)).numpy().astype(np.float64)
        return z * self.pose_std + self.pose_mean

    def features(self, images) -> np.ndarray:
        m = self.corr_classifier
        return _predict(m, _as_nchw(images), fn=m.features).numpy().astype(np.float64)

    def named_blocks(self):
        for name in ("y_classifier", "corr_classifier", "pose_regressor"):
            for key, value in getattr(self, name).state_dict().items():
                yield f"{name}.{key}", value
        yield "pose_mean", torch.from_numpy(self.pose_mean.astype(np.float32))
        yield "pose_std", torch.from_numpy(self.pose_std.astype(np.float32))


def fit_oracles(dataset, rng: np.random.Generator, max_epochs: int = 40, held_out_frac: float = 0.2,
                targets=(0.97, 0.97, 0.1), augment: SpatialConfig = SpatialConfig(),
                strict: bool = True) -> Oracles:
    """Train y / corr classifiers and a pose regressor on ground-truth factors.

    Classifiers see spatially transformed copies during training so they stay
    valid on transformed inputs. Each model trains until its held-out target
    is reached; missing a target within ``max_epochs`` raises, or with
    ``strict=False`` only warns.
    """
    if dataset.factors is None:
        raise ValueError("oracles need a dataset with ground-truth factors")
    images = _as_nchw(dataset.images)
    y = torch.from_numpy(np.array(dataset.labels, dtype=np.int64))
    corr = torch.from_numpy(np.array(dataset.corr_labels(), dtype=np.int64))
    pose = dataset.pose_targets()
    perm = rng.permutation(len(images))
    n_test = max(1, int(round(len(images) * held_out_frac)))
    test, train = perm[:n_test], perm[n_test:]
    pose_mean, pose_std = pose[train].mean(axis=0), pose[train].std(axis=0)
    pose_std = np.where(pose_std > 1e-12, pose_std, 1.0)
    # kept at float32 precision so a saved oracle predicts exactly the same poses
    pose_mean = pose_mean.astype(np.float32).astype(np.float64)
    pose_std = pose_std.astype(np.float32).astype(np.float64)
    pose_z = torch.from_numpy(((pose - pose_mean) / pose_std).astype(np.float32))
    y_acc_target, corr_acc_target, pose_target = targets
    scores = {}
    missed = []

    def fail(message):
        if strict:
            raise OracleTrainingError(message + "; use a larger oracle or an easier CorrelationSpec")
        missed.append(message)

    def classifier(labels, n_out, name, target):
        def validate(model, epoch):
            acc = float((_predict(model, images[test]).argmax(1) == labels[test]).float().mean())
            scores[name] = acc
            return acc >= target and epoch >= 2

        model = _fit_conv(images[train], labels[train], n_out, rng, max_epochs, augment=augment,
                          validate=validate)
        if scores[name] < target:
            fail(f"oracle {name} reached {scores[name]:.3f} < {target}")
        return model

    y_clf = classifier(y, dataset.num_classes, "y_acc", y_acc_target)
    corr_clf = classifier(corr, int(corr.max()) + 1, "corr_acc", corr_acc_target)

    def validate_pose(model, epoch):
        pred = _predict(model, images[test]).numpy() * pose_std + pose_mean
        err = pose_error(pred, pose[test])
        scores["pose_err"] = err
        return err <= pose_target and epoch >= 2

    pose_reg = _fit_conv(images[train], pose_z[train], pose.shape[1], rng, max_epochs, regression=True,
                         validate=validate_pose)
    if scores["pose_err"] > pose_target:
        fail(f"oracle pose regressor reached {scores['pose_err']:.3f} > {pose_target}")
    if missed:
        warnings.warn("; ".join(missed))
    return Oracles(y_clf, corr_clf, pose_reg, pose_mean, pose_std, scores)


@dataclass
class EvalReport:
    variant: str = "full"
    chance_level: float | None = None
    probe_acc_y_from_u: float | None = None
    probe_acc_y_from_eu: float | None = None
    pose_regression_r2: float | None = None
    pose_regression_error: float | None = None
    leakage_acc: float | None = None
    frechet_by_domain: dict | None = None
    frechet_mean: float | None = None
    frechet_floor: float | None = None
    diversity: float | None = None
    factor_transfer: dict | None = None
    num_translations: int | None = None
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["frechet_by_domain"] is not None:
            d["frechet_by_domain"] = {str(k): v for k, v in d["frechet_by_domain"].items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def to_text(self) -> str:
        def fmt(v):
            if v is None:
                return "null"
            if isinstance(v, float):
                return f"{v:.4f}"
            if isinstance(v, dict):
                return ", ".join(f"{k}={fmt(x)}" for k, x in v.items())
            return str(v)

        lines = [f"{name:<24}{fmt(value)}" for name, value in self.to_dict().items() if name != "warnings"]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines) + "\n"


def _translation_plan(eval_labels: np.ndarray, num_classes: int, refs_per_source: int,
                      rng: np.random.Generator):
    """Source/reference index pairs: every source to every other class,
    ``refs_per_source`` random references from the target class."""
    by_class = {k: np.flatnonzero(eval_labels == k) for k in range(num_classes)}
    src, ref = [], []
    for i, yi in enumerate(eval_labels):
        for k in range(num_classes):
            if k == yi or len(by_class[k]) == 0:
                continue
            picks = rng.choice(by_class[k], size=refs_per_source, replace=len(by_class[k]) < refs_per_source)
            src.extend([i] * refs_per_source)
            ref.extend(picks.tolist())
    return np.array(src, dtype=np.int64), np.array(ref, dtype=np.int64)


def full_report(artifacts, train_dataset, eval_dataset, oracles: Oracles | None, seed: int = 0,
                refs_per_source: int = 10, probe_hidden: int = 128, probe_epochs: int = 200,
                t_mode: str = "identity") -> EvalReport:
    """Compute every metric available for ``artifacts``; unavailable ones stay None.

    References are fed to E_c through ``t_mode``; runs trained with masking
    always see masked references since that is the only input E_c knows.
    """
    from .trainer import reconstruct, translate

    rng = np.random.default_rng([seed, 7])
    K = train_dataset.num_classes
    report = EvalReport(variant=artifacts.variant, chance_level=1.0 / K)
    bank = artifacts.bank
    if bank is not None and artifacts.variant != "amortized":
        codes = bank.u_prime.detach().numpy()
        _, report.probe_acc_y_from_u = train_probe(codes, train_dataset.labels, 0.2, rng,
                                                   hidden=probe_hidden, epochs=probe_epochs)
        if train_dataset.factors is not None:
            err = pose_regression_probe(codes, train_dataset.pose_targets())
            report.pose_regression_error = err
            report.pose_regression_r2 = 1 - err**2
    bundle = artifacts.bundle
    if bundle is None or bundle.Eu is None or eval_dataset is None:
        report.warnings.append("translation metrics skipped: bundle lacks stage-2 encoders")
        return report

    x_eval = _as_nchw(eval_dataset.images)
    eu_codes = _predict(bundle.Eu, x_eval).numpy()
    _, report.probe_acc_y_from_eu = train_probe(eu_codes, eval_dataset.labels, 0.2, rng,
                                                hidden=probe_hidden, epochs=probe_epochs)

    src, ref = _translation_plan(eval_dataset.labels, K, refs_per_source, rng)
    y_embed = bank.y_embed if bank is not None else None
    ref_labels = eval_dataset.labels[ref]
    if artifacts.config.t_mode == "mask":
        t_mode = "mask"
    ref_masks = None
    if t_mode == "mask":
        if eval_dataset.masks is None:
            raise ValueError("mask-mode evaluation needs an eval dataset with masks")
        ref_masks = torch.from_numpy(np.array(eval_dataset.masks))[ref]
    t_rng = np.random.default_rng([seed, 8])
    chunks = []
    for s in range(0, len(src), 500):
        sl = slice(s, s + 500)
        chunks.append(translate(x_eval[src[sl]], x_eval[ref[sl]], bundle,
                                reference_labels=ref_labels[sl] if y_embed is not None else None,
                                y_embed=y_embed, t_mode=t_mode, t_rng=t_rng,
                                reference_masks=None if ref_masks is None else ref_masks[sl]))
    trans = torch.cat(chunks) if chunks else x_eval[:0]
    report.num_translations = int(len(trans))
    src_labels = eval_dataset.labels[src]
    report.leakage_acc, notes = source_leakage_accuracy(trans, src_labels, ref_labels, K, rng)
    report.warnings += notes

    if oracles is None:
        report.warnings.append("oracle metrics skipped: no oracles")
        return report
    real_feats = oracles.features(x_eval)
    trans_feats = oracles.features(trans)
    fid = desk_fid(real_feats, eval_dataset.labels, trans_feats, ref_labels, K)
    report.frechet_by_domain = fid["per_class"]
    report.frechet_mean = fid["mean"]
    report.warnings += fid["flags"]
    train_feats = oracles.features(train_dataset.images)
    floor = desk_fid(train_feats, train_dataset.labels, real_feats, eval_dataset.labels, K)
    report.frechet_floor = floor["mean"]

    sets = [trans_feats[(src == i) & (ref_labels == k)] for i in range(len(eval_dataset)) for k in range(K)]
    sets = [s for s in sets if len(s)]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report.diversity = diversity_score(sets)
    report.warnings += [str(w.message) for w in caught]

    if eval_dataset.factors is not None:
        pose_gt = eval_dataset.pose_targets()
        scale = pose_gt.std(axis=0)
        recon = torch.cat([reconstruct(x_eval[i : i + 500], bundle) for i in range(0, len(x_eval), 500)])
        ref_corr = eval_dataset.corr_labels()[ref]
        report.factor_transfer = {
            "y_acc": float((oracles.predict_y(trans) == ref_labels).mean()),
            "corr_acc": float((oracles.predict_corr(trans) == ref_corr).mean()),
            "pose_err": pose_error(oracles.predict_pose(trans), pose_gt[src], scale),
            "recon_pose_err": pose_error(oracles.predict_pose(recon), pose_gt, scale),
        }
    return report
