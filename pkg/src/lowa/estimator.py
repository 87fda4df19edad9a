"""scikit-learn style wrapper around the training schedule and inference modes."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import attribute_category, combos, frequency_split, label_sets
from .evaluation import evaluate
from .inference import (
    Predictor,
    detect_closed_vocab,
    detect_open_vocab,
    localize_by_attribute,
)
from .model import LOWAModel, ModelConfig
from .trainer import TrainConfig, TrainingData, run_schedule
from .validation import check_images, check_queries, check_records, check_threshold


class LOWADetector(BaseEstimator):
    """Open-vocabulary detector trained with the O -> A -> F schedule.

    ``fit`` takes a list of :class:`~lowa.dataset.ImageRecord`.  ``predict``
    runs free-text detection on an ``(N, H, W, 3)`` image array,
    ``decision_function`` returns the raw ``(N, P, Q)`` logits and
    ``transform`` the ``(N, P, D)`` visual embeddings.
    """

    def __init__(self, steps_o=2000, steps_a=2000, steps_f=1000, batch_size=8, lr_image=1e-3, lr_text=1e-3,
                 n_neg=8, image_size=64, patch_size=8, embed_dim=64, num_layers=2, num_heads=4, proj_dim=32,
                 threshold=0.5, random_state=0):
        self.steps_o = steps_o
        self.steps_a = steps_a
        self.steps_f = steps_f
        self.batch_size = batch_size
        self.lr_image = lr_image
        self.lr_text = lr_text
        self.n_neg = n_neg
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.proj_dim = proj_dim
        self.threshold = threshold
        self.random_state = random_state

    def _configs(self):
        model_cfg = ModelConfig(image_size=self.image_size, patch_size=self.patch_size, embed_dim=self.embed_dim,
                                num_layers=self.num_layers, num_heads=self.num_heads, proj_dim=self.proj_dim,
                                mlp_hidden=2 * self.embed_dim)
        train_cfg = TrainConfig(steps_o=self.steps_o, steps_a=self.steps_a, steps_f=self.steps_f,
                                batch_size=self.batch_size, lr_image=self.lr_image, lr_text=self.lr_text,
                                n_neg=self.n_neg, seed=int(self.random_state))
        return model_cfg, train_cfg

    def fit(self, X, y=None):
        records = check_records(X)
        check_threshold(self.threshold)
        model_cfg, train_cfg = self._configs()
        data = TrainingData.build(records)
        if len(data.vocab) > model_cfg.text_vocab_size:
            raise ValueError(f"vocabulary of {len(data.vocab)} words exceeds text_vocab_size")
        self.model_ = LOWAModel(model_cfg, seed=train_cfg.seed)
        self.checkpoint_, self.loss_history_ = run_schedule(self.model_, data, train_cfg)
        self.vocab_ = data.vocab
        self.classes_, self.attributes_ = label_sets(records)
        self.train_combos_ = combos(records)
        self.frequency_table_ = frequency_split(records)
        self.predictor_ = Predictor(self.model_, self.vocab_, data.templates)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_size)
        return np.stack([self.predictor_.image_features(x)[1] for x in X])

    def decision_function(self, X, queries) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_size)
        queries = check_queries(queries)
        return np.stack([self.predictor_.score(x, queries).logits for x in X])

    def predict(self, X, queries, mode: str = "open", top_k: int = 10):
        """Detections per image; ``mode`` is ``open``, ``closed`` or ``attr-localize``."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_size)
        queries = check_queries(queries)
        if mode == "open":
            return [detect_open_vocab(self.predictor_, x, queries, check_threshold(self.threshold)) for x in X]
        if mode == "closed":
            return [detect_closed_vocab(self.predictor_, x, queries) for x in X]
        if mode == "attr-localize":
            return [localize_by_attribute(self.predictor_, x, queries, top_k) for x in X]
        raise ValueError(f"unknown mode {mode!r}")

    def score(self, X, y=None) -> float:
        """Box-free attribute-classification mAP on annotated records."""
        check_is_fitted(self, "model_")
        records = check_records(X)
        report = evaluate(self.predictor_, records, self.classes_, self.attributes_, 8, self.frequency_table_,
                          sorted(c for c in combos(records) if c not in self.train_combos_),
                          {a: attribute_category(a) for a in self.attributes_})
        return float(report.map_all) if report.map_all is not None else float("nan")
