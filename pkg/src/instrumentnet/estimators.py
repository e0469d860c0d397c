"""scikit-learn style wrappers around the front end, the network and the aggregation.

These follow the usual estimator contract (hyper-parameters in ``__init__``,
learned state in trailing-underscore attributes, ``fit`` returns ``self``),
so they work with ``clone``, ``get_params`` and pipelines.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone
from sklearn.utils.validation import check_is_fitted

from . import network as N
from . import trainer as T
from .aggregate import WindowPredictions, aggregate, normalize_strategy, predict_excerpt, threshold_labels
from .dataset import INSTRUMENTS
from .dsp import AudioClip, MelConfig, MelSpectrogram, clip_to_mel, preprocess
from .evaluate import ClassCounts, accumulate, micro_macro
from .kernels import ActivationKind
from .validation import check_excerpts, check_single_labels, check_windows


class MelSpectrogramTransformer(TransformerMixin, BaseEstimator):
    """WAV paths or :class:`AudioClip` objects to log-mel spectrograms. Stateless."""

    def __init__(self, fft_size=1024, hop_size=512, mel_bins=128, target_rate=22050, fmin=0.0, fmax=None):
        self.fft_size = fft_size
        self.hop_size = hop_size
        self.mel_bins = mel_bins
        self.target_rate = target_rate
        self.fmin = fmin
        self.fmax = fmax

    def fit(self, X=None, y=None):
        self.config_ = MelConfig(self.fft_size, self.hop_size, self.mel_bins, self.target_rate,
                                 self.fmin, self.fmax)
        return self

    def transform(self, X) -> list[MelSpectrogram]:
        check_is_fitted(self, "config_")
        out = []
        for x in check_excerpts(X):
            if isinstance(x, MelSpectrogram):
                out.append(x)
            elif isinstance(x, AudioClip):
                out.append(clip_to_mel(x, self.config_))
            else:
                out.append(preprocess(x, self.config_))
        return out


class InstrumentConvNet(ClassifierMixin, BaseEstimator):
    """The ConvNet trained on fixed-length single-label windows.

    ``X`` is ``(n_windows, frames, 128)``; ``y`` holds instrument abbreviations
    or canonical indices. ``predict_proba`` returns all 11 sigmoid outputs,
    which are independent per class and need not sum to one.
    """

    def __init__(self, activation="lrelu", alpha=0.33, learning_rate=1e-3, batch_size=128,
                 validation_fraction=0.15, patience=2, max_epochs=100, loss="binary",
                 random_state=0, threads=1):
        self.activation = activation
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.patience = patience
        self.max_epochs = max_epochs
        self.loss = loss
        self.random_state = random_state
        self.threads = threads

    def _activation(self) -> ActivationKind:
        kind = self.activation
        if isinstance(kind, ActivationKind):
            return kind
        if kind == "prelu":
            return ActivationKind("prelu", 0.25)
        return ActivationKind.parse(kind, self.alpha)

    def training_config(self, window_seconds: float = 1.0) -> T.TrainingConfig:
        return T.TrainingConfig(window_seconds=window_seconds, learning_rate=self.learning_rate,
                                batch_size=self.batch_size, validation_fraction=self.validation_fraction,
                                patience_epochs=self.patience, max_epochs=self.max_epochs,
                                seed=int(self.random_state), activation=self._activation(),
                                loss=self.loss, threads=self.threads)

    def fit(self, X, y):
        X = check_windows(X, bins=N.MEL_BINS)
        y = check_single_labels(y, len(X))
        self.model_, self.report_ = T.train(X, y, self.training_config())
        self.classes_ = np.array(INSTRUMENTS)
        self.n_frames_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model: N.Model, **params) -> "InstrumentConvNet":
        est = cls(activation=model.spec.activation, **params)
        est.model_ = model
        est.report_ = None
        est.classes_ = np.array(INSTRUMENTS)
        est.n_frames_ = model.spec.input_frames
        return est

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_windows(X, frames=self.n_frames_, bins=N.MEL_BINS)
        return T.predict_batches(self.model_, X)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def save(self, path) -> Path:
        check_is_fitted(self, "model_")
        return N.save_model(self.model_, path)


class PredominantInstrumentRecognizer(BaseEstimator):
    """Excerpt-level multi-label recogniser.

    ``fit`` takes single-label training excerpts (3 s spectrograms, clips or
    WAV paths), cuts them into ``window_seconds`` chunks and trains
    ``classifier``. ``predict`` slides the window over excerpts of any length
    and returns the set of instruments whose aggregated score reaches
    ``threshold``.
    """

    def __init__(self, classifier=None, window_seconds=1.0, strategy="S2", threshold=0.5,
                 mel_transformer=None):
        self.classifier = classifier
        self.window_seconds = window_seconds
        self.strategy = strategy
        self.threshold = threshold
        self.mel_transformer = mel_transformer

    def _mels(self, X) -> list[MelSpectrogram]:
        tf = self.mel_transformer_ if hasattr(self, "mel_transformer_") else None
        if tf is None:
            tf = (MelSpectrogramTransformer() if self.mel_transformer is None else clone(self.mel_transformer)).fit()
        return tf.transform(X)

    def fit(self, X, y):
        normalize_strategy(self.strategy)
        base = self.mel_transformer if self.mel_transformer is not None else MelSpectrogramTransformer()
        self.mel_transformer_ = clone(base).fit()
        mels = self._mels(X)
        labels = check_single_labels(y, len(mels))
        chunks, chunk_labels = [], []
        for mel, lab in zip(mels, labels):
            pieces = T.slice_excerpt(mel, self.window_seconds, self.mel_transformer_.config_)
            chunks += pieces
            chunk_labels += [lab] * len(pieces)
        clf = InstrumentConvNet() if self.classifier is None else clone(self.classifier)
        self.classifier_ = clf.fit(np.stack(chunks), np.asarray(chunk_labels))
        return self

    def window_predictions(self, X) -> list[WindowPredictions]:
        check_is_fitted(self, "classifier_")
        return [predict_excerpt(self.classifier_.model_, mel) for mel in self._mels(X)]

    def decision_function(self, X) -> np.ndarray:
        """Aggregated per-class scores, ``(n_excerpts, 11)``."""
        return np.stack([aggregate(w, self.strategy) for w in self.window_predictions(X)])

    def predict(self, X) -> list[tuple[str, ...]]:
        return [threshold_labels(s, self.threshold) for s in self.decision_function(X)]

    def score(self, X, y) -> float:
        """Micro-averaged F1 against annotated label sets."""
        counts = ClassCounts()
        for pred, gold in zip(self.predict(X), y):
            accumulate(pred, gold, counts)
        return micro_macro(counts).micro[2]
