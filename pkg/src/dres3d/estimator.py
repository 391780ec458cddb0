"""Scikit-learn style estimator around the decoder and its training loop."""

from __future__ import annotations

from typing import Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import PhraseMaskSet, point_iou
from .exceptions import ShapeMismatch
from .metrics import EvalRecord, miou
from .model import (
    ForwardTrace,
    ModelConfig,
    ModelState,
    forward_pooled,
    init_state,
    load_checkpoint,
    predict_masks,
    save_checkpoint,
)
from .samples import Sample
from .training import LossConfig, TrainSchedule, loss_value, train


def check_samples(X, config: ModelConfig | None = None) -> list[Sample]:
    """Validate a sequence of :class:`Sample` against the model widths."""
    if isinstance(X, Sample):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("expected at least one sample")
    for s in X:
        if not isinstance(s, Sample):
            raise TypeError(f"expected Sample, got {type(s).__name__}")
        if config is not None:
            if s.pooled.shape[1] != config.c:
                raise ShapeMismatch(f"{s.description.description_id}: pooled width {s.pooled.shape[1]} != c={config.c}")
            if s.token_features.shape[1] != config.e:
                raise ShapeMismatch(f"{s.description.description_id}: token width {s.token_features.shape[1]} != e={config.e}")
    return X


class DetailBase(BaseEstimator):
    """Phrase-level mask decoder.

    ``fit`` takes prepared :class:`~dres3d.samples.Sample` objects and trains
    with per-snapshot BCE + Dice + Score supervision; ``predict`` returns one
    :class:`~dres3d.core.PhraseMaskSet` per sample.

    Parameters
    ----------
    d, e, c : int
        Model, token-feature and pooled point-feature widths.
    n_layers, heads, ffn_hidden : int
        Decoder depth, attention heads, feed-forward width (default ``4 * d``).
    lambda_bce, lambda_dice, lambda_score : float
        Loss weights.
    supervise_all_layers : bool
        Supervise every query snapshot, or only the last one.
    learning_rate, decay_epochs, decay_rate : step schedule.
    epochs, batch_size, optimizer, max_steps : training loop controls.
    random_state : int
        Seeds initialization and shuffling.

    Attributes
    ----------
    state_ : ModelState
    log_ : list of dict
        One record per epoch.
    n_steps_ : int
    """

    def __init__(self, d=32, e=32, c=16, n_layers=6, heads=4, ffn_hidden=None,
                 lambda_bce=1.0, lambda_dice=1.0, lambda_score=0.5,
                 supervise_all_layers=True, learning_rate=1e-4,
                 decay_epochs=(26, 34, 42), decay_rate=0.5, epochs=50,
                 batch_size=16, optimizer="adam", max_steps=None, random_state=0):
        self.d = d
        self.e = e
        self.c = c
        self.n_layers = n_layers
        self.heads = heads
        self.ffn_hidden = ffn_hidden
        self.lambda_bce = lambda_bce
        self.lambda_dice = lambda_dice
        self.lambda_score = lambda_score
        self.supervise_all_layers = supervise_all_layers
        self.learning_rate = learning_rate
        self.decay_epochs = decay_epochs
        self.decay_rate = decay_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.max_steps = max_steps
        self.random_state = random_state

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, e=self.e, c=self.c, n_layers=self.n_layers,
                           heads=self.heads, ffn_hidden=self.ffn_hidden)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambda_bce, self.lambda_dice, self.lambda_score,
                          self.supervise_all_layers)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(self.learning_rate, tuple(self.decay_epochs), self.decay_rate,
                             self.epochs, self.batch_size, self.random_state,
                             self.optimizer, self.max_steps)

    def fit(self, X: Sequence[Sample], y=None, on_epoch=None):
        cfg = self.model_config()
        X = check_samples(X, cfg)
        result = train(X, self.schedule(), self.loss_config(),
                       init_state(cfg, self.random_state), on_epoch=on_epoch)
        self.state_ = result.state
        self.log_ = result.log
        self.n_steps_ = result.steps
        return self

    def forward(self, sample: Sample) -> ForwardTrace:
        check_is_fitted(self, "state_")
        return forward_pooled(sample.pooled, sample.token_features, self.state_)

    def predict(self, X: Sequence[Sample]) -> list[PhraseMaskSet]:
        check_is_fitted(self, "state_")
        X = check_samples(X, self.state_.config)
        thr = self.state_.config.binarize_threshold
        return [predict_masks(self.forward(s), s.description, s.partition, thr) for s in X]

    def evaluate(self, X: Sequence[Sample]) -> list[EvalRecord]:
        X = check_samples(X)
        out = []
        for s, pred in zip(X, self.predict(X)):
            ious = [point_iou(p, g) for p, g in zip(pred.masks, s.gt_masks)]
            d = s.description
            out.append(EvalRecord(d.description_id, ious, d.is_long, d.is_complex))
        return out

    def score(self, X: Sequence[Sample], y=None) -> float:
        """Phrase-level mIoU on ``X``."""
        return miou(self.evaluate(X))

    def loss(self, X: Sequence[Sample], loss_config: LossConfig | None = None) -> float:
        check_is_fitted(self, "state_")
        return loss_value(self.state_, check_samples(X, self.state_.config),
                          loss_config or self.loss_config())

    def save(self, path) -> None:
        check_is_fitted(self, "state_")
        save_checkpoint(self.state_, path)

    @classmethod
    def from_state(cls, state: ModelState, **params) -> DetailBase:
        cfg = state.config
        est = cls(d=cfg.d, e=cfg.e, c=cfg.c, n_layers=cfg.n_layers, heads=cfg.heads,
                  ffn_hidden=cfg.ffn_hidden, **params)
        est.state_ = state
        est.log_ = []
        est.n_steps_ = 0
        return est

    @classmethod
    def load(cls, path, **params) -> DetailBase:
        return cls.from_state(load_checkpoint(path), **params)
