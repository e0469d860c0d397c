"""Predominant instrument recognition in polyphonic audio with a deep ConvNet.

Modules: ``dsp`` (WAV decoding and log-mel front end), ``kernels`` (tensor
operations and their gradients), ``network`` (model construction, inference,
persistence), ``trainer``, ``aggregate`` (sliding-window decisions),
``evaluate`` (metrics), ``dataset`` (corpus layout and synthesis),
``estimators`` (scikit-learn style wrappers) and ``cli``.
"""

__version__ = "0.1.0"

from .aggregate import predict_excerpt, threshold_labels
from .dataset import INSTRUMENTS
from .dsp import MelConfig, MelSpectrogram, preprocess
from .estimators import InstrumentConvNet, MelSpectrogramTransformer, PredominantInstrumentRecognizer
from .kernels import ActivationKind
from .network import build_model, load_model, save_model
from .trainer import TrainingConfig, train

__all__ = [
    "ActivationKind", "INSTRUMENTS", "InstrumentConvNet", "MelConfig", "MelSpectrogram",
    "MelSpectrogramTransformer", "PredominantInstrumentRecognizer", "TrainingConfig",
    "build_model", "load_model", "predict_excerpt", "preprocess", "save_model", "threshold_labels", "train",
]
