"""Sliding-window inference over long excerpts and excerpt-level label decisions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network as N
from .dataset import INSTRUMENTS
from .dsp import MelConfig, MelSpectrogram

STRATEGIES = ("S1", "S2")
S1_THRESHOLDS = tuple(round(0.02 * k, 2) for k in range(1, 10))
S2_THRESHOLDS = tuple(round(0.20 + 0.05 * k, 2) for k in range(9))


def normalize_strategy(strategy: str) -> str:
    s = strategy.upper()
    if s not in STRATEGIES:
        raise ValueError(f"unknown aggregation strategy {strategy!r}")
    return s


def threshold_grid(strategy: str) -> tuple[float, ...]:
    return S1_THRESHOLDS if normalize_strategy(strategy) == "S1" else S2_THRESHOLDS


@dataclass
class WindowPredictions:
    matrix: np.ndarray  # (n_windows, n_classes) sigmoid outputs
    window_seconds: float
    hop_seconds: float

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        if self.matrix.shape[0] < 1:
            raise ValueError("need at least one window")

    @property
    def n_windows(self) -> int:
        return self.matrix.shape[0]


@dataclass
class AggregationResult:
    strategy: str
    scores: np.ndarray
    threshold: float
    labels: tuple[str, ...]


def window_offsets(n_frames: int, window_frames: int) -> list[int]:
    """Start frames: every half window, plus a final right-aligned window if needed."""
    if n_frames < window_frames:
        raise ValueError(f"excerpt of {n_frames} frames is shorter than one {window_frames}-frame window")
    hop = max(1, window_frames // 2)
    offsets = list(range(0, n_frames - window_frames + 1, hop))
    if offsets[-1] + window_frames < n_frames:
        offsets.append(n_frames - window_frames)
    return offsets


def sliding_windows(mel: MelSpectrogram, window_frames: int) -> list[MelSpectrogram]:
    return [mel.window(o, window_frames) for o in window_offsets(mel.frame_count, window_frames)]


def predict_excerpt(model: N.Model, mel: MelSpectrogram, batch: int = 64) -> WindowPredictions:
    """Run the model on every analysis window of ``mel`` (inference mode)."""
    frames = model.spec.input_frames
    offsets = window_offsets(mel.frame_count, frames)
    stack = np.stack([mel.values[o:o + frames] for o in offsets])
    rows = np.concatenate([N.forward_batch(model, stack[s:s + batch]) for s in range(0, len(stack), batch)])
    cfg = getattr(mel, "config", MelConfig())
    sec = cfg.hop_size / cfg.target_rate
    return WindowPredictions(rows, frames * sec, max(1, frames // 2) * sec)


def aggregate(preds: WindowPredictions | np.ndarray, strategy: str = "S2") -> np.ndarray:
    """S1: class-wise mean. S2: class-wise sum divided by the largest class sum."""
    m = preds.matrix if isinstance(preds, WindowPredictions) else np.atleast_2d(preds)
    if normalize_strategy(strategy) == "S1":
        return m.mean(axis=0)
    sums = m.sum(axis=0)
    top = sums.max()
    return sums / top if top > 0 else sums


def threshold_labels(scores: np.ndarray, theta: float, vocabulary=INSTRUMENTS) -> tuple[str, ...]:
    """Every class whose aggregated score is at least ``theta``."""
    if theta <= 0:
        raise ValueError("threshold must be positive")
    return tuple(vocabulary[i] for i in np.flatnonzero(np.asarray(scores) >= theta))


def decide(preds: WindowPredictions, strategy: str = "S2", theta: float = 0.5) -> AggregationResult:
    strategy = normalize_strategy(strategy)
    scores = aggregate(preds, strategy)
    return AggregationResult(strategy, scores, theta, threshold_labels(scores, theta))


def format_prediction_line(path: str, result: AggregationResult) -> str:
    """``path<TAB>strategy<TAB>theta<TAB>s0,...,s10<TAB>abbr,abbr``."""
    scores = ",".join(f"{s:.6f}" for s in result.scores)
    return f"{path}\t{result.strategy}\t{result.threshold:.2f}\t{scores}\t{','.join(result.labels)}"


def parse_prediction_line(line: str) -> tuple[str, str, float, np.ndarray, tuple[str, ...]]:
    path, strategy, theta, scores, labels = line.rstrip("\n").split("\t")
    return (path, strategy, float(theta), np.array([float(s) for s in scores.split(",")]),
            tuple(x for x in labels.split(",") if x))
