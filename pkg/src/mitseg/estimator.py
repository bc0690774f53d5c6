"""scikit-learn style wrapper around the model and training harness.

SegformerSegmenter exposes fit/predict/score with get_params/set_params
semantics, so the model drops into sklearn pipelines and model-selection
tooling. Images are channels-last [N, H, W, 3] in [0, 1]; labels are
[N, H, W] integer maps with 255 reserved as the ignore id.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .configs import builtin_config, micro_config
from .errors import DataError
from .model import build
from .train import (ConfusionMatrix, SegSample, TrainSpec, predict as
                    predict_labels, train_toy)
from .validation import check_image_batch, check_label_batch


class SegformerSegmenter(BaseEstimator):
    """Trainable semantic segmenter with the estimator interface.

    variant: "micro" or one of B0..B5 ("micro" is the desk-scale default;
    the full variants train too, just slowly at CPU scale).
    """

    def __init__(self, variant: str = "micro", num_classes: int = 4,
                 total_iters: int = 400, base_lr: float = 1e-3,
                 batch_size: int = 2, crop_size: int = 64,
                 weight_decay: float = 0.01, augment: bool = True,
                 seed: int = 0):
        self.variant = variant
        self.num_classes = num_classes
        self.total_iters = total_iters
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.crop_size = crop_size
        self.weight_decay = weight_decay
        self.augment = augment
        self.seed = seed

    def _config(self):
        if self.variant == "micro":
            return micro_config(num_classes=self.num_classes)
        return builtin_config(self.variant, num_classes=self.num_classes)

    def fit(self, X, y):
        X = check_image_batch(X)
        y = check_label_batch(y, X, self.num_classes)
        dataset = [SegSample(image=img.transpose(2, 0, 1), labels=lab)
                   for img, lab in zip(X, y)]
        spec = TrainSpec(total_iters=self.total_iters, base_lr=self.base_lr,
                         batch_size=self.batch_size,
                         crop=(self.crop_size, self.crop_size),
                         weight_decay=self.weight_decay, augment=self.augment,
                         seed=self.seed)
        self.model_ = build(self._config(), seed=self.seed)
        self.log_ = train_toy(self.model_, dataset, spec)
        return self

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_image_batch(X)
        return np.stack([predict_labels(self.model_, img.transpose(2, 0, 1))
                         for img in X])

    def score(self, X, y) -> float:
        """Mean IoU over the given batch."""
        self._check_fitted()
        X = check_image_batch(X)
        y = check_label_batch(y, X, self.num_classes)
        cm = ConfusionMatrix(self.num_classes)
        for pred, lab in zip(self.predict(X), y):
            cm.update(pred, lab)
        return cm.miou()[1]

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise DataError("estimator is not fitted; call fit first")
