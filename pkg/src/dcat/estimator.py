"""Scikit-learn estimator facade over the dual-branch model.

The matrix contract packs one sample per row: the flattened global image in
[0, 1] (channel, row, column order) followed by the four box integers
(x, y, w, h) naming the crop region. `dataset_to_matrix` produces this layout
from a loaded Dataset, so both in-memory arrays and generated datasets fit
the same estimators, and the estimators compose with the usual sklearn
tooling (clone, pipelines, grid search).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .model import DcatConfig, DcatModel
from .record import AttentionRecord
from .synth import Dataset, batch_views
from .train import TrainConfig, train

__all__ = [
    "DcatClassifier",
    "DcatRegressor",
    "dataset_to_matrix",
    "matrix_to_dataset",
    "validate_dual_matrix",
    "validate_labels",
]


def dataset_to_matrix(dataset: Dataset) -> np.ndarray:
    """Dataset -> [n, 3*side*side + 4] float64 rows of pixels plus box."""
    n = len(dataset)
    pixels = dataset.images.reshape(n, -1).astype(np.float64) / 255.0
    return np.concatenate([pixels, dataset.boxes.astype(np.float64)], axis=1)


def matrix_to_dataset(X: np.ndarray, side: int, y=None) -> Dataset:
    images, boxes = validate_dual_matrix(X, side)
    n = images.shape[0]
    labels = np.zeros(n, dtype=np.int64) if y is None else np.asarray(y)
    if labels.dtype.kind == "f":
        labels = np.rint(labels).astype(np.int64)
    return Dataset(images=images, boxes=boxes, labels=labels.astype(np.int64),
                   ids=[f"{i:06d}" for i in range(n)])


def validate_dual_matrix(X: np.ndarray, side: int):
    """Split the packed matrix into u8 images and int boxes, or raise ValueError."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError(f"X must be 2d [n_samples, n_features], got shape {X.shape}")
    want = 3 * side * side + 4
    if X.shape[1] != want:
        raise ValueError(
            f"X has {X.shape[1]} columns but a {side}px dual sample needs "
            f"{want} (3*{side}*{side} pixels + 4 box coordinates)")
    if X.shape[0] == 0:
        raise ValueError("X is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    pixels = X[:, :-4]
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValueError("pixel columns must lie in [0, 1]")
    boxes = X[:, -4:]
    if not np.allclose(boxes, np.rint(boxes)):
        raise ValueError("box columns (x, y, w, h) must be integers")
    boxes = np.rint(boxes).astype(np.int64)
    if boxes[:, 2:].min() < 1:
        raise ValueError("box w and h must be >= 1")
    if boxes[:, :2].min() < 0 or (boxes[:, :2] + boxes[:, 2:]).max() > side:
        raise ValueError(f"boxes must lie inside the {side}px image")
    images = np.rint(pixels * 255.0).astype(np.uint8).reshape(-1, 3, side, side)
    return images, boxes


def validate_labels(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1d, got shape {y.shape}")
    if y.dtype.kind == "f":
        if not np.all(y == np.rint(y)):
            raise ValueError("classification labels must be integers")
        y = np.rint(y)
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got "
                         f"[{y.min()}, {y.max()}]")
    return y


class _DcatBase(BaseEstimator):
    """Shared plumbing: config assembly, fit loop, embedding transform."""

    _regression = False

    def __init__(self, num_classes=3, global_side=96, mip_side=96,
                 patch_global=12, patch_mip=16, d_global=64, d_mip=32,
                 heads_global=4, heads_mip=2, depth_global=6, depth_mip=1,
                 cpa_rounds=3, layers=1, mlp_ratio=4, alpha_global=0.5,
                 alpha_mip=0.5, dual_input=True, cpa_enabled=True,
                 ranking_enabled=True, cca_mode=False, single_branch="global",
                 head_merge="concat", precision="f32", seed=0, epochs=60,
                 warmup_epochs=6, batch_size=32, base_lr=1e-3,
                 weight_decay=0.05, augment=True):
        self.num_classes = num_classes
        self.global_side = global_side
        self.mip_side = mip_side
        self.patch_global = patch_global
        self.patch_mip = patch_mip
        self.d_global = d_global
        self.d_mip = d_mip
        self.heads_global = heads_global
        self.heads_mip = heads_mip
        self.depth_global = depth_global
        self.depth_mip = depth_mip
        self.cpa_rounds = cpa_rounds
        self.layers = layers
        self.mlp_ratio = mlp_ratio
        self.alpha_global = alpha_global
        self.alpha_mip = alpha_mip
        self.dual_input = dual_input
        self.cpa_enabled = cpa_enabled
        self.ranking_enabled = ranking_enabled
        self.cca_mode = cca_mode
        self.single_branch = single_branch
        self.head_merge = head_merge
        self.precision = precision
        self.seed = seed
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.augment = augment

    # ------------------------------------------------------------------

    def _configs(self) -> tuple[DcatConfig, TrainConfig]:
        cfg = DcatConfig(
            num_classes=self.num_classes, regression=self._regression,
            global_side=self.global_side, mip_side=self.mip_side,
            patch_global=self.patch_global, patch_mip=self.patch_mip,
            d_global=self.d_global, d_mip=self.d_mip,
            heads_global=self.heads_global, heads_mip=self.heads_mip,
            depth_global=self.depth_global, depth_mip=self.depth_mip,
            cpa_rounds=self.cpa_rounds, layers=self.layers,
            mlp_ratio=self.mlp_ratio, alpha_global=self.alpha_global,
            alpha_mip=self.alpha_mip, dual_input=self.dual_input,
            cpa_enabled=self.cpa_enabled, ranking_enabled=self.ranking_enabled,
            cca_mode=self.cca_mode, single_branch=self.single_branch,
            head_merge=self.head_merge, precision=self.precision,
            seed=self.seed)
        tc = TrainConfig(epochs=self.epochs, warmup_epochs=self.warmup_epochs,
                         batch_size=self.batch_size, base_lr=self.base_lr,
                         weight_decay=self.weight_decay, seed=self.seed,
                         precision=self.precision)
        return cfg, tc

    def _to_dataset(self, X, y=None) -> Dataset:
        if isinstance(X, Dataset):
            if y is not None:
                labels = self._validate_y(np.asarray(y))
                return Dataset(images=X.images, boxes=X.boxes, labels=labels,
                               ids=list(X.ids))
            return X
        images, boxes = validate_dual_matrix(X, self.global_side)
        labels = np.zeros(images.shape[0], dtype=np.int64)
        if y is not None:
            labels = self._validate_y(np.asarray(y))
            if labels.shape[0] != images.shape[0]:
                raise ValueError(f"X has {images.shape[0]} rows but y has "
                                 f"{labels.shape[0]}")
        dtype = np.int64 if not self._regression else np.float64
        return Dataset(images=images, boxes=boxes,
                       labels=labels.astype(dtype),
                       ids=[f"{i:06d}" for i in range(images.shape[0])])

    def fit(self, X, y):
        if y is None:
            raise ValueError("y is required")
        ds = self._to_dataset(X, y)
        cfg, tc = self._configs()
        self.model_ = DcatModel(cfg)
        result = train(self.model_, ds, tc, augment=self.augment)
        self.history_ = result.rows
        self.n_features_in_ = (3 * self.global_side ** 2 + 4
                               if not isinstance(X, Dataset) else
                               3 * ds.side ** 2 + 4)
        self.n_iter_ = self.epochs
        return self

    def _forward_batches(self, ds: Dataset, want_features: bool = False):
        cfg = self.model_.config
        outs = []
        for start in range(0, len(ds), 128):
            idx = np.arange(start, min(start + 128, len(ds)))
            g, m, _ = batch_views(ds, idx, cfg.mip_side, dtype=cfg.np_dtype)
            if want_features:
                record = AttentionRecord()
                self.model_.forward(g, m, record=record)
                parts = []
                for branch in ("global", "mip"):
                    feats = record.branch_features(branch)
                    if feats:
                        parts.append(feats[-1][1][:, 0, :])
                outs.append(np.concatenate(parts, axis=1))
            else:
                outs.append(self.model_.forward(g, m).data)
        return np.concatenate(outs, axis=0)

    def transform(self, X) -> np.ndarray:
        """Final class-token embedding per sample, branches concatenated."""
        check_is_fitted(self, "model_")
        return self._forward_batches(self._to_dataset(X), want_features=True)

    def fit_transform(self, X, y) -> np.ndarray:
        return self.fit(X, y).transform(X)


class DcatClassifier(ClassifierMixin, _DcatBase):
    """Dual-view image classifier trained with the built-in loop.

    X rows pack a flattened global image plus the crop box; `score` is mean
    accuracy via the usual sklearn mixin.
    """

    def _validate_y(self, y):
        return validate_labels(y, self.num_classes)

    def fit(self, X, y):
        super().fit(X, y)
        self.classes_ = np.arange(self.num_classes, dtype=np.int64)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        logits = self._forward_batches(self._to_dataset(X))
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self._forward_batches(self._to_dataset(X)).argmax(axis=1)


class DcatRegressor(RegressorMixin, _DcatBase):
    """Dual-view scalar regressor (squared-error head on the same backbone)."""

    _regression = True

    def _validate_y(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 1:
            raise ValueError(f"y must be 1d, got shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains non-finite values")
        return y

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self._forward_batches(self._to_dataset(X)).reshape(-1)
