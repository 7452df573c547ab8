"""scikit-learn style wrapper around CC-Net training and main-model inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import datapipe
from .inference import binarize, sliding_window_predict
from .metrics import dice
from .training import TrainConfig, train
from .validation import check_cases, check_stride


class CCNetSegmenter(BaseEstimator):
    """Semi-supervised 3D binary segmenter.

    ``fit(X, y)`` takes a list of volumes and a parallel list of masks where
    ``None`` marks an unlabeled volume. Only the main model is used by
    ``predict``/``predict_proba``; the auxiliary models exist during training.

    Set ``mode="supervised"`` to train the main model alone on the labeled
    cases (the baseline without consistency training).
    """

    def __init__(self, base_channels=16, patch_size=(112, 112, 80), max_iteration=10000,
                 lr=0.01, lambda_s=0.3, lambda_u_max=1.0, temperature=0.1,
                 labeled_per_batch=2, unlabeled_per_batch=2, shared_encoder=False,
                 detach_pseudo_labels=False, mode="ccnet", norm="batchnorm",
                 encoder_convs=(1, 2, 3, 3, 3), decoder_convs=(3, 3, 2, 1),
                 stride=(18, 18, 4), threshold=0.5, crop_margin=25, augment=True,
                 seed=1337, device="cpu"):
        self.base_channels = base_channels
        self.patch_size = patch_size
        self.max_iteration = max_iteration
        self.lr = lr
        self.lambda_s = lambda_s
        self.lambda_u_max = lambda_u_max
        self.temperature = temperature
        self.labeled_per_batch = labeled_per_batch
        self.unlabeled_per_batch = unlabeled_per_batch
        self.shared_encoder = shared_encoder
        self.detach_pseudo_labels = detach_pseudo_labels
        self.mode = mode
        self.norm = norm
        self.encoder_convs = encoder_convs
        self.decoder_convs = decoder_convs
        self.stride = stride
        self.threshold = threshold
        self.crop_margin = crop_margin
        self.augment = augment
        self.seed = seed
        self.device = device

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            max_iteration=self.max_iteration, lr=self.lr, lambda_s=self.lambda_s,
            lambda_u_max=self.lambda_u_max, temperature=self.temperature,
            labeled_per_batch=self.labeled_per_batch,
            unlabeled_per_batch=self.unlabeled_per_batch, shared_encoder=self.shared_encoder,
            detach_pseudo_labels=self.detach_pseudo_labels, mode=self.mode, norm=self.norm,
            encoder_convs=tuple(self.encoder_convs), decoder_convs=tuple(self.decoder_convs),
            base_channels=self.base_channels, patch_size=tuple(self.patch_size),
            augment=self.augment, seed=self.seed, checkpoint_every=0)

    def fit(self, X, y=None, out_dir=None):
        cases = check_cases(X, y)
        check_stride(self.stride)
        config = self._train_config()
        prepped = [datapipe.preprocess(c, self.crop_margin) for c in cases]
        labeled = [c for c in prepped if c.label is not None]
        unlabeled = [c for c in prepped if c.label is None]
        state = train(config, labeled, unlabeled, out_dir=out_dir, device=self.device)
        self.config_ = config
        self.net_ = state.net
        self.history_ = state.history
        self.n_labeled_ = len(labeled)
        self.n_unlabeled_ = len(unlabeled)
        self.n_iter_ = state.iteration
        return self

    @property
    def main_model_(self):
        check_is_fitted(self, "net_")
        return self.net_.main

    def predict_proba(self, X) -> list[np.ndarray]:
        """Foreground probability per voxel, on each input's original grid."""
        model = self.main_model_
        out = []
        for case in check_cases(X):
            # labels never steer the test-time crop
            prepped = datapipe.preprocess(datapipe.Case(case.volume), self.crop_margin)
            probs = sliding_window_predict(model, prepped.volume, self.patch_size,
                                           check_stride(self.stride))
            out.append(datapipe.uncrop(probs[1], prepped, fill=0.0))
        return out

    def predict(self, X) -> list[np.ndarray]:
        return [binarize(p, self.threshold) for p in self.predict_proba(X)]

    def score(self, X, y) -> float:
        """Mean Dice of the predicted masks against ``y``."""
        preds = self.predict(X)
        return float(np.mean([dice(p, t) for p, t in zip(preds, y)]))

    def save(self, path):
        from .checkpoint import save_checkpoint

        check_is_fitted(self, "net_")
        return save_checkpoint(path, self.net_, self.config_, self.n_iter_,
                               {"estimator_params": _jsonable(self.get_params())})


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
