"""scikit-learn style facade over the alignment and classification stack,
so both compose with pipelines, ``clone``, and grid search."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .align import (
    AlignmentCache,
    CanonicalTemplate,
    LandmarkSet,
    cached_transform,
    estimate_similarity,
    warp_crop,
)
from .metrics import MultiLabelEvaluator
from .model import ModelConfig, init_params
from .train import LabeledFrames, TrainConfig, predict_probs, train
from .validation import check_image_batch, check_label_matrix


class WindowedAttentionClassifier(BaseEstimator):
    """Multi-label AU classifier: fit/predict over image batches.

    ``X`` may be a pre-normalized (n, 3, H, W) float array or an
    (n, H, W, 3) uint8 raster batch. ``y`` is an (n, num_aus) binary
    matrix whose columns follow the dataset tag's AU order.
    """

    def __init__(
        self,
        input_size: int = 32,
        patch_size: int = 2,
        depths: tuple = (2, 2),
        dims: tuple = (16, 32),
        heads: tuple = (2, 4),
        window_size: int = 4,
        shift_size: int = 2,
        mlp_ratio: float = 4.0,
        dataset_tag: str = "pain-icu",
        attention_mode: str = "windowed",
        learning_rate: float = 1e-3,
        epochs: int = 10,
        batch_size: int = 16,
        num_workers: int = 3,
        flip_probability: float = 0.5,
        threshold: float = 0.5,
        seed: int = 0,
    ):
        self.input_size = input_size
        self.patch_size = patch_size
        self.depths = depths
        self.dims = dims
        self.heads = heads
        self.window_size = window_size
        self.shift_size = shift_size
        self.mlp_ratio = mlp_ratio
        self.dataset_tag = dataset_tag
        self.attention_mode = attention_mode
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.num_workers = num_workers
        self.flip_probability = flip_probability
        self.threshold = threshold
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=self.input_size,
            patch_size=self.patch_size,
            depths=tuple(self.depths),
            dims=tuple(self.dims),
            heads=tuple(self.heads),
            window_size=self.window_size,
            shift_size=self.shift_size,
            mlp_ratio=self.mlp_ratio,
            dataset_tag=self.dataset_tag,
            attention_mode=self.attention_mode,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            num_workers=self.num_workers,
            flip_probability=self.flip_probability,
        )

    def fit(self, X, y):
        cfg_model = self._model_config()
        X = check_image_batch(X, cfg_model.input_size)
        y = check_label_matrix(y, X.shape[0], cfg_model.num_aus)
        dataset = LabeledFrames(
            images=X, labels=y, frame_ids=tuple(f"sample{i}" for i in range(X.shape[0]))
        )
        params = init_params(cfg_model, seed=self.seed)
        params, state, history = train(params, cfg_model, dataset, self._train_config())
        self.model_config_ = cfg_model
        self.params_ = params
        self.history_ = history
        self.au_ids_ = cfg_model.au_ids
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("classifier is not fitted; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_image_batch(X, self.model_config_.input_size)
        return predict_probs(self.params_, self.model_config_, X)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > self.threshold).astype(np.int64)

    def score(self, X, y) -> float:
        """Macro F1 over the AU set."""
        self._check_fitted()
        probs = self.predict_proba(X)
        y = check_label_matrix(y, probs.shape[0], probs.shape[1])
        evaluator = MultiLabelEvaluator(self.au_ids_, self.threshold)
        evaluator.update_batch(probs, y)
        return evaluator.report().macro_f1


class FaceAligner(BaseEstimator, TransformerMixin):
    """Transformer from (raster, 68-landmark array) pairs to aligned crops.

    Stateless apart from its transform cache; ``fit`` only resolves the
    template so the object composes with sklearn pipelines.
    """

    def __init__(self, out_size: int = 224, use_cache: bool = True):
        self.out_size = out_size
        self.use_cache = use_cache

    def fit(self, X=None, y=None):
        self.template_ = CanonicalTemplate.default().scaled(self.out_size)
        self.cache_ = AlignmentCache() if self.use_cache else None
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "template_"):
            self.fit()
        crops = []
        for i, (raster, points) in enumerate(X):
            if isinstance(points, LandmarkSet):
                landmarks = points
                # the cache key is the frame id, so only identified
                # landmark sets may use it
                cacheable = self.cache_ is not None
            else:
                landmarks = LandmarkSet(f"item{i}", points)
                cacheable = False
            if cacheable:
                t = cached_transform(self.cache_, landmarks, self.template_)
            else:
                t = estimate_similarity(landmarks, self.template_)
            crops.append(warp_crop(np.asarray(raster), t, self.out_size))
        return np.stack(crops)
