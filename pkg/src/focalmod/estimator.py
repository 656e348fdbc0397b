"""scikit-learn style wrapper around model building and training."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import build_model, preset
from .tensor import softmax
from .trainer import SyntheticDataset, TrainConfig, predict_logits, train
from .validation import check_images, check_labels


class FocalNetClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier on (N, H, W, C) arrays.

    Architecture comes from ``preset``; ``dims``, ``depths`` and
    ``focal_levels`` override it when given. Labels may be any sortable
    values; they are mapped to class ids through ``classes_``.

    Example
    -------
    >>> clf = FocalNetClassifier(total_steps=200).fit(X, y)   # doctest: +SKIP
    >>> clf.predict(X[:4])                                     # doctest: +SKIP
    """

    def __init__(self, preset="micro", dims=None, depths=None, focal_levels=None,
                 lr=1e-3, weight_decay=0.05, warmup_steps=100, total_steps=2000, batch_size=32,
                 label_smoothing=0.1, hflip=True, seed=0):
        self.preset = preset
        self.dims = dims
        self.depths = depths
        self.focal_levels = focal_levels
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.label_smoothing = label_smoothing
        self.hflip = hflip
        self.seed = seed

    def _model_config(self, n_classes, channels):
        overrides = {"num_classes": n_classes, "in_chans": channels}
        for key in ("dims", "depths", "focal_levels"):
            value = getattr(self, key)
            if value is not None:
                overrides[key] = tuple(value)
        cfg = preset(self.preset)
        if "dims" in overrides or "depths" in overrides or "focal_levels" in overrides:
            n = len(overrides.get("dims", cfg.dims))
            overrides.setdefault("focal_kernels", cfg.focal_kernels[:1] * n)
            for key in ("dims", "depths", "focal_levels"):
                overrides.setdefault(key, getattr(cfg, key)[:1] * n)
        return replace(cfg, **overrides)

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        if y.ndim != 1:
            y = check_labels(y)  # raises with the offending shape
        self.classes_, y = np.unique(y, return_inverse=True)
        y = check_labels(y, n=len(X))
        cfg = self._model_config(len(self.classes_), X.shape[3])
        model = build_model(cfg, seed=self.seed)
        X = check_images(X, stride=cfg.total_stride)
        tc = TrainConfig(lr=self.lr, weight_decay=self.weight_decay, warmup_steps=self.warmup_steps,
                         total_steps=self.total_steps, batch_size=self.batch_size,
                         label_smoothing=self.label_smoothing, hflip=self.hflip, seed=self.seed)
        data = SyntheticDataset(images=X, labels=y, seed=self.seed, classes=len(self.classes_), shapes=())
        self.model_, self.history_ = train(model, data, tc)
        self.n_features_in_ = X.shape[3]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, channels=self.n_features_in_, stride=self.model_.config.total_stride)
        return predict_logits(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        """Pooled features from before the classifier, shape (N, C_last)."""
        check_is_fitted(self, "model_")
        X = check_images(X, channels=self.n_features_in_, stride=self.model_.config.total_stride)
        return self.model_.features(X)
