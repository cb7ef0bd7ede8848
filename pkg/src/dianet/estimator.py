"""scikit-learn style wrappers: a dynamic-image transformer and the classifier."""

from __future__ import annotations

from dataclasses import fields, replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .data import FrameSequence, stratified_holdout
from .dynimg import NormMode, Phase
from .errors import DianetError, NotFittedError, ShapeError
from .harness import TrainConfig, _InputCache, evaluate, network_inputs, train_fold
from .model import StreamMode, predict_proba
from .seeding import derive_seed

_PHASES = {"onset": (Phase.ONSET_APEX,), "offset": (Phase.APEX_OFFSET,), "full": (Phase.FULL,)}
_PHASES["all"] = _PHASES["onset"] + _PHASES["offset"] + _PHASES["full"]
_PHASES["dual"] = _PHASES["onset"] + _PHASES["offset"]
_SINGLE_MODE = {
    Phase.ONSET_APEX: StreamMode.SINGLE_ONSET,
    Phase.APEX_OFFSET: StreamMode.SINGLE_OFFSET,
    Phase.FULL: StreamMode.SINGLE_FULL,
}


def check_sequences(X, y=None):
    """Validate a list of FrameSequence (and optional labels); returns ``(list, labels)``.

    Labels default to each sequence's own ``label``.
    """
    if isinstance(X, FrameSequence):
        raise ShapeError("expected a list of FrameSequence, got a single sequence")
    seqs = list(X)
    if not seqs:
        raise ValueError("empty input")
    for i, s in enumerate(seqs):
        if not isinstance(s, FrameSequence):
            raise TypeError(f"item {i} is {type(s).__name__}, expected FrameSequence")
    shapes = {s.frame_shape for s in seqs}
    if len(shapes) > 1:
        raise ShapeError(f"sequences have differing frame shapes {sorted(shapes)}")
    labels = np.array([s.label for s in seqs]) if y is None else np.asarray(y)
    if labels.shape != (len(seqs),):
        raise ShapeError(f"{len(seqs)} sequences but labels of shape {labels.shape}")
    return seqs, labels


def _check_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit first")


class DynamicImageTransformer(TransformerMixin, BaseEstimator):
    """Map FrameSequences to stacked, resized, normalized dynamic images.

    ``phases`` is one of onset, offset, full, dual (onset then offset) or all;
    the output is N x (P*C) x S x S with phases stacked along channels.
    """

    def __init__(self, phases="dual", input_size=32, norm_mode="per_channel"):
        self.phases = phases
        self.input_size = input_size
        self.norm_mode = norm_mode

    def fit(self, X, y=None):
        seqs, _ = check_sequences(X, y)
        if self.phases not in _PHASES:
            raise ValueError(f"phases must be one of {sorted(_PHASES)}, got {self.phases!r}")
        self.n_channels_in_ = seqs[0].frame_shape[0]
        return self

    def transform(self, X):
        _check_fitted(self, "n_channels_in_")
        seqs, _ = check_sequences(X)
        if seqs[0].frame_shape[0] != self.n_channels_in_:
            raise ShapeError(f"fitted on {self.n_channels_in_} channels, got {seqs[0].frame_shape[0]}")
        cfg = TrainConfig(input_size=self.input_size, norm_mode=NormMode(self.norm_mode))
        modes = [_SINGLE_MODE[p] for p in _PHASES[self.phases]]
        out = []
        for s in seqs:
            rasters = []
            for mode in modes:
                rasters.extend(network_inputs(s, replace(cfg, stream_mode=mode)))
            out.append(np.concatenate(rasters, axis=0))
        return np.stack(out)


_TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig))


class DianetClassifier(ClassifierMixin, BaseEstimator):
    """Dual-stream dynamic-image classifier trained with Adam and early stopping.

    Inputs are lists of FrameSequence. ``fit`` holds out a class-stratified
    ``val_fraction`` of the samples for early stopping (none if 0).
    """

    def __init__(
        self,
        lr=1e-4,
        batch_size=32,
        max_epochs=50,
        patience=10,
        lam=0.1,
        seed=0,
        input_size=32,
        augment=True,
        stream_mode="dual_phase",
        attention="cross",
        feature_dim=64,
        n_tokens=8,
        hidden=None,
        dropout=0.3,
        stages=((8, 3, 1), (16, 3, 1)),
        tie_backbones=False,
        val_fraction=0.1,
        norm_mode="per_channel",
    ):
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.lam = lam
        self.seed = seed
        self.input_size = input_size
        self.augment = augment
        self.stream_mode = stream_mode
        self.attention = attention
        self.feature_dim = feature_dim
        self.n_tokens = n_tokens
        self.hidden = hidden
        self.dropout = dropout
        self.stages = stages
        self.tie_backbones = tie_backbones
        self.val_fraction = val_fraction
        self.norm_mode = norm_mode

    def train_config(self):
        return TrainConfig(**{name: getattr(self, name) for name in _TRAIN_FIELDS})

    def fit(self, X, y=None):
        seqs, labels = check_sequences(X, y)
        cfg = self.train_config()
        self.classes_, encoded = np.unique(labels, return_inverse=True)
        if len(self.classes_) < 2:
            raise DianetError("need at least two classes to fit")
        seqs = [_relabel(s, int(k)) for s, k in zip(seqs, encoded)]
        rng = np.random.default_rng(derive_seed(cfg.seed, "estimator-val"))
        train_idx, val_idx = stratified_holdout(np.arange(len(seqs)), encoded, cfg.val_fraction, rng)
        self.params_, self.history_ = train_fold(
            [seqs[i] for i in train_idx], [seqs[i] for i in val_idx], cfg, n_classes=len(self.classes_)
        )
        self.n_channels_in_ = seqs[0].frame_shape[0]
        return self

    def _logits(self, X):
        _check_fitted(self, "params_")
        seqs, _ = check_sequences(X)
        cfg = self.train_config()
        dummy = np.zeros(len(seqs), dtype=int)
        _, _, logits = evaluate(self.params_, _InputCache(seqs, cfg), np.arange(len(seqs)), dummy, cfg)
        return logits

    def predict_proba(self, X):
        return predict_proba(self._logits(X))

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[np.argmax(logits, axis=1)]


def _relabel(seq, label):
    return seq if seq.label == label else replace(seq, label=label)
