"""Input checks shared by the estimator classes."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import INSTRUMENTS, LABEL_INDEX, canonical_label
from .dsp import AudioClip, MelSpectrogram


def check_windows(X, frames: int | None = None, bins: int | None = None) -> np.ndarray:
    """Stack of spectrogram windows as a finite float64 ``(n, frames, bins)`` array."""
    if isinstance(X, MelSpectrogram):
        X = [X]
    if isinstance(X, (list, tuple)):
        X = np.stack([np.asarray(getattr(x, "values", x), dtype=np.float64) for x in X])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected (n_windows, frames, bins), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no windows given")
    if frames is not None and X.shape[1] != frames:
        raise ValueError(f"expected {frames} frames per window, got {X.shape[1]}")
    if bins is not None and X.shape[2] != bins:
        raise ValueError(f"expected {bins} mel bins, got {X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X


def check_single_labels(y, n: int) -> np.ndarray:
    """Class indices from abbreviations or integers."""
    y = list(y)
    if len(y) != n:
        raise ValueError(f"{n} samples but {len(y)} labels")
    out = []
    for lab in y:
        if isinstance(lab, (int, np.integer)):
            if not 0 <= int(lab) < len(INSTRUMENTS):
                raise ValueError(f"class index {lab} out of range")
            out.append(int(lab))
        else:
            out.append(LABEL_INDEX[canonical_label(str(lab))])
    return np.asarray(out, dtype=np.int64)


def check_excerpts(X) -> list:
    """Excerpts as a list of paths, clips or spectrograms."""
    if isinstance(X, (str, Path, AudioClip, MelSpectrogram)):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("no excerpts given")
    for x in X:
        if not isinstance(x, (str, Path, AudioClip, MelSpectrogram)):
            raise TypeError(f"unsupported excerpt type {type(x).__name__}")
    return X
