"""scikit-learn style wrappers around the two-stage trainer and the probes."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import pose_error, train_probe
from .losses import LossWeights
from .nets import ArchConfig
from .synth import Dataset
from .trainer import TrainConfig, reconstruct, train_stage1, train_stage2, translate
from .transforms import SpatialConfig
from .validation import check_codes, check_images, check_labels, check_masks

__all__ = ["OverlordTranslator", "LabelProbe", "PoseRegressionProbe"]


def _nchw(X: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(X)).permute(0, 3, 1, 2).contiguous()


def _nhwc(x: torch.Tensor) -> np.ndarray:
    return x.permute(0, 2, 3, 1).contiguous().numpy()


class OverlordTranslator(TransformerMixin, BaseEstimator):
    """Two-stage class-conditional disentanglement model.

    ``fit(X, y)`` trains the per-image latent stage and then the encoder
    stage. ``transform`` returns ``[E_y(x) | E_c(x) | E_u(x)]`` (see
    ``code_slices_``); ``translate`` renders sources in the reference's class
    and correlated attributes.
    """

    def __init__(self, epochs_stage1=200, epochs_stage2=100, batch_size=32, lr_latent=0.01,
                 lr_generator=1e-3, lr_encoder=1e-4, lr_stage2=1e-4, lambda_b=0.001, lambda_enc=10.0,
                 lambda_adv=1.0, r1_gamma=1.0, t_mode="random_spatial", d_y=32, d_c=16, d_u=16,
                 base_channels=32, num_scales=4, latent_optimizer="row", seed=0):
        self.epochs_stage1 = epochs_stage1
        self.epochs_stage2 = epochs_stage2
        self.batch_size = batch_size
        self.lr_latent = lr_latent
        self.lr_generator = lr_generator
        self.lr_encoder = lr_encoder
        self.lr_stage2 = lr_stage2
        self.lambda_b = lambda_b
        self.lambda_enc = lambda_enc
        self.lambda_adv = lambda_adv
        self.r1_gamma = r1_gamma
        self.t_mode = t_mode
        self.d_y = d_y
        self.d_c = d_c
        self.d_u = d_u
        self.base_channels = base_channels
        self.num_scales = num_scales
        self.latent_optimizer = latent_optimizer
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr_latent=self.lr_latent, lr_generator=self.lr_generator, lr_encoder=self.lr_encoder,
            lr_stage2=self.lr_stage2, epochs_stage1=self.epochs_stage1, epochs_stage2=self.epochs_stage2,
            batch_size=self.batch_size,
            weights=LossWeights(self.lambda_b, self.lambda_enc, self.lambda_adv, self.r1_gamma),
            t_mode=self.t_mode, t_config=SpatialConfig(), seed=self.seed,
            d_y=self.d_y, d_c=self.d_c, d_u=self.d_u,
            arch=ArchConfig(self.base_channels, self.num_scales), latent_optimizer=self.latent_optimizer,
        )

    def fit(self, X, y, masks=None):
        X = check_images(X)
        labels, self.classes_ = check_labels(y, len(X))
        if masks is not None:
            masks = check_masks(masks, X.shape[:3])
        elif self.t_mode == "mask":
            raise ValueError("t_mode='mask' needs masks")
        config = self._train_config()
        if min(X.shape[1:3]) != ArchConfig(self.base_channels, self.num_scales).resolution:
            raise ValueError(f"images must be {config.arch.resolution}x{config.arch.resolution} "
                             f"for num_scales={self.num_scales}")
        data = Dataset(images=X, labels=labels, masks=masks, factors=None, num_classes=len(self.classes_))
        self.stage1_ = train_stage1(data, config)
        self.artifacts_ = train_stage2(self.stage1_, data, config)
        self.image_shape_ = X.shape[1:]
        d = self.artifacts_.bundle.dims
        self.code_slices_ = {"y": slice(0, d.d_y), "c": slice(d.d_y, d.d_y + d.d_c),
                             "u": slice(d.d_y + d.d_c, d.d_y + d.d_c + d.d_u)}
        return self

    def _check_input(self, X, name="X") -> torch.Tensor:
        check_is_fitted(self, "artifacts_")
        X = check_images(X, name)
        if X.shape[1:] != self.image_shape_:
            raise ValueError(f"{name} has image shape {X.shape[1:]}, model was fit on {self.image_shape_}")
        return _nchw(X)

    @torch.no_grad()
    def transform(self, X):
        x = self._check_input(X)
        b = self.artifacts_.bundle
        parts = [b.Ey(x)]
        if b.Ec is not None:
            parts.append(b.Ec(x))
        parts.append(b.Eu(x))
        return torch.cat(parts, dim=1).numpy()

    def reconstruct(self, X):
        return _nhwc(reconstruct(self._check_input(X), self.artifacts_.bundle))

    def translate(self, X_source, X_reference, reference_masks=None):
        src = self._check_input(X_source, "X_source")
        ref = self._check_input(X_reference, "X_reference")
        if len(src) != len(ref):
            raise ValueError("X_source and X_reference must have the same length")
        t_mode = "mask" if self.t_mode == "mask" else "identity"
        masks = None
        if t_mode == "mask":
            if reference_masks is None:
                raise ValueError("a mask-mode model needs reference_masks")
            masks = torch.from_numpy(check_masks(reference_masks, tuple(ref.shape[:1]) + self.image_shape_[:2]))
        return _nhwc(translate(src, ref, self.artifacts_.bundle, t_mode=t_mode, reference_masks=masks))


class LabelProbe(ClassifierMixin, BaseEstimator):
    """Two-layer perceptron on standardized codes.

    ``fit`` holds out ``held_out_frac`` of the data and stores the held-out
    accuracy in ``held_out_score_``.
    """

    def __init__(self, hidden=128, epochs=200, batch_size=64, lr=1e-3, held_out_frac=0.2, seed=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.held_out_frac = held_out_frac
        self.seed = seed

    def fit(self, X, y):
        X = check_codes(X)
        labels, self.classes_ = check_labels(y, len(X))
        self.probe_, self.held_out_score_ = train_probe(
            X, labels, self.held_out_frac, np.random.default_rng(self.seed),
            self.hidden, self.epochs, self.batch_size, self.lr,
        )
        self.n_features_in_ = X.shape[1]
        return self

    @torch.no_grad()
    def predict_proba(self, X):
        check_is_fitted(self, "probe_")
        X = check_codes(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, probe was fit on {self.n_features_in_}")
        logits = self.probe_(torch.from_numpy(X.astype(np.float32)))
        return torch.softmax(logits, dim=1).numpy()

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class PoseRegressionProbe(RegressorMixin, BaseEstimator):
    """Linear least-squares map from codes to pose targets (with intercept)."""

    def fit(self, X, y):
        X = check_codes(X)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if len(y) != len(X):
            raise ValueError("X and y differ in length")
        A = np.hstack([X, np.ones((len(X), 1))])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        self.coef_, self.intercept_ = coef[:-1], coef[-1]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return check_codes(X) @ self.coef_ + self.intercept_

    def error(self, X, y) -> float:
        """Mean normalized RMSE; 1.0 matches predicting the mean."""
        y = np.asarray(y, dtype=np.float64)
        return pose_error(self.predict(X), y if y.ndim == 2 else y[:, None])
