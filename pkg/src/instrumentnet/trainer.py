"""Mini-batch training with a held-out validation split and early stopping."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels as K
from . import network as N
from .dataset import LABEL_INDEX, DatasetManifest
from .dsp import MelConfig, MelSpectrogram, preprocess

log = logging.getLogger(__name__)

WINDOW_CHOICES = (0.5, 1.0, 1.5, 3.0)
# a mini-batch is split into fixed shards so the gradient reduction order does
# not depend on how many threads evaluate them
SHARD_SIZE = 16
LOSSES = ("binary", "normalized", "literal")


@dataclass(frozen=True)
class TrainingConfig:
    window_seconds: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 128
    validation_fraction: float = 0.15
    patience_epochs: int = 2
    max_epochs: int = 100
    seed: int = 0
    activation: K.ActivationKind = field(default_factory=K.ActivationKind)
    loss: str = "binary"
    threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.window_seconds <= 0 or abs(3.0 / self.window_seconds - round(3.0 / self.window_seconds)) > 1e-9:
            raise ValueError("window_seconds must divide 3.0 evenly")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience_epochs < 0:
            raise ValueError("batch_size and max_epochs must be positive, patience non-negative")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")

    def window_frames(self, mel_config: MelConfig = MelConfig()) -> int:
        return mel_config.frames_for_seconds(self.window_seconds)


@dataclass
class TrainReport:
    epoch_losses: list[tuple[float, float]] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_validation_loss: float = float("inf")
    wall_time: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        """Plain dict; ``timing=False`` drops ``wall_time`` so equal runs serialize identically."""
        d = asdict(self)
        if not timing:
            del d["wall_time"]
        d["epoch_losses"] = [{"epoch": i + 1, "train": tr, "validation": va}
                             for i, (tr, va) in enumerate(self.epoch_losses)]
        return d

    def save_json(self, path, timing: bool = False) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(timing), indent=2, sort_keys=True) + "\n")
        return path

    def log_lines(self) -> list[str]:
        lines = [f"epoch {i + 1} train_loss={tr:.6f} val_loss={va:.6f}"
                 for i, (tr, va) in enumerate(self.epoch_losses)]
        lines.append(f"stopped epoch={self.stopped_epoch} best_epoch={self.best_epoch} "
                     f"best_val_loss={self.best_validation_loss:.6f}")
        return lines


# ---------------------------------------------------------------------------
# data preparation


def slice_excerpt(mel: MelSpectrogram | np.ndarray, window_seconds: float,
                  config: MelConfig = MelConfig()) -> list[np.ndarray]:
    """Cut an excerpt into consecutive non-overlapping chunks, dropping the remainder."""
    values = np.asarray(getattr(mel, "values", mel))
    frames = config.frames_for_seconds(window_seconds)
    count = values.shape[0] // frames
    if count == 0:
        raise ValueError(f"a {window_seconds} s window ({frames} frames) is longer than the "
                         f"{values.shape[0]}-frame excerpt")
    return [values[i * frames:(i + 1) * frames] for i in range(count)]


def load_training_chunks(manifest: DatasetManifest, window_seconds: float,
                         config: MelConfig = MelConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Chunk matrix ``(n, frames, bins)`` and integer labels for a training manifest."""
    xs, ys = [], []
    for ex in manifest:
        if len(ex.labels) != 1:
            raise ValueError(f"{ex.audio_path}: training excerpts must carry one label")
        chunks = slice_excerpt(preprocess(ex.audio_path, config), window_seconds, config)
        xs += chunks
        ys += [LABEL_INDEX[ex.labels[0]]] * len(chunks)
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


def split_validation(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint ``(train_idx, val_idx)`` with ``round(fraction * n)`` validation items."""
    if n < 1:
        raise ValueError("cannot split an empty dataset")
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val == n:
        raise ValueError(f"validation fraction {fraction} leaves an empty split for {n} items")
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def one_hot(y: np.ndarray, n_classes: int = N.N_CLASSES) -> np.ndarray:
    out = np.zeros((len(y), n_classes))
    out[np.arange(len(y)), y] = 1.0
    return out


# ---------------------------------------------------------------------------
# loss and gradients


def batch_loss(pred: np.ndarray, target: np.ndarray, kind: str = "binary"):
    """Summed loss over a batch and its gradient with respect to the sigmoid outputs."""
    if kind == "literal":
        return K.categorical_cross_entropy(pred, target), K.categorical_cross_entropy_grad(pred, target)
    if kind == "normalized":
        return K.normalized_cross_entropy(pred, target)
    if kind == "binary":
        return K.binary_cross_entropy(pred, target)
    raise ValueError(f"unknown loss {kind!r}")


def pairwise_sum(items: list):
    """Sum in a fixed binary-tree order so the result is independent of scheduling."""
    items = list(items)
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def _shard_pass(model: N.Model, x: np.ndarray, target: np.ndarray, loss: str, rng: np.random.Generator):
    pred, caches = N.forward_batch(model, x, training=True, rng=rng, keep=True)
    value, dpred = batch_loss(pred, target, loss)
    return value, N.backward_batch(model, dpred, caches)


def batch_gradients(model: N.Model, x: np.ndarray, y: np.ndarray, loss: str, seed_key: tuple,
                    pool: ThreadPoolExecutor | None = None):
    """Mean loss and mean parameter gradients over one mini-batch."""
    target = one_hot(y, model.spec.n_classes)
    starts = range(0, len(x), SHARD_SIZE)
    jobs = [(x[s:s + SHARD_SIZE], target[s:s + SHARD_SIZE],
             np.random.default_rng([*seed_key, k])) for k, s in enumerate(starts)]
    if pool is None:
        results = [_shard_pass(model, xs, ts, loss, r) for xs, ts, r in jobs]
    else:
        results = list(pool.map(lambda job: _shard_pass(model, job[0], job[1], loss, job[2]), jobs))
    total = pairwise_sum([r[0] for r in results])
    grads = {name: pairwise_sum([r[1][name] for r in results]) / len(x) for name in results[0][1]}
    return total / len(x), grads


def evaluate_loss(model: N.Model, x: np.ndarray, y: np.ndarray, loss: str = "binary",
                  batch: int = 64) -> float:
    if len(x) == 0:
        return float("nan")
    target = one_hot(y, model.spec.n_classes)
    total = [batch_loss(N.forward_batch(model, x[s:s + batch]), target[s:s + batch], loss)[0]
             for s in range(0, len(x), batch)]
    return float(pairwise_sum(total) / len(x))


def predict_batches(model: N.Model, x: np.ndarray, batch: int = 64) -> np.ndarray:
    return np.concatenate([N.forward_batch(model, x[s:s + batch]) for s in range(0, len(x), batch)])


def train_epoch(model: N.Model, x: np.ndarray, y: np.ndarray, config: TrainingConfig, epoch: int,
                pool: ThreadPoolExecutor | None = None) -> float:
    """One shuffled pass with an Adam step per mini-batch; returns the mean training loss."""
    order = np.random.default_rng([config.seed, 1, epoch]).permutation(len(x))
    losses = []
    for b, s in enumerate(range(0, len(x), config.batch_size)):
        idx = order[s:s + config.batch_size]
        value, grads = batch_gradients(model, x[idx], y[idx], config.loss, (config.seed, 2, epoch, b), pool)
        losses.append(value * len(idx))
        for p in model.parameters:
            p.grad = grads[p.name]
            K.adam_step(p, lr=config.learning_rate)
            p.grad = None
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}, batch {b}")
    return float(pairwise_sum(losses) / len(x))


class EarlyStopping:
    """Track the best validation loss; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def check_dataset(x: np.ndarray, y: np.ndarray):
    if len(x) == 0:
        raise ValueError("training set is empty")
    if len(x) != len(y):
        raise ValueError("chunk and label counts differ")
    if len(np.unique(y)) < 2:
        raise ValueError("training needs at least two classes")


def train(x: np.ndarray, y: np.ndarray, config: TrainingConfig = TrainingConfig(),
          model: N.Model | None = None) -> tuple[N.Model, TrainReport]:
    """Fit a fresh model (or ``model``) and return the best-validation-epoch weights."""
    x = np.asarray(x, dtype=K.DTYPE)
    y = np.asarray(y, dtype=np.int64)
    check_dataset(x, y)
    t0 = time.perf_counter()
    tr_idx, va_idx = split_validation(len(x), config.validation_fraction,
                                      np.random.default_rng([config.seed, 0]))
    if model is None:
        model = N.build_model(config.activation, x.shape[1], rng=config.seed)
    report = TrainReport()
    stopper = EarlyStopping(config.patience_epochs)
    best_state = model.state()
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            tr_loss = train_epoch(model, x[tr_idx], y[tr_idx], config, epoch, pool)
            va_loss = evaluate_loss(model, x[va_idx], y[va_idx], config.loss)
            report.epoch_losses.append((tr_loss, va_loss))
            log.info("epoch %d train_loss=%.6f val_loss=%.6f", epoch, tr_loss, va_loss)
            stop = stopper.update(epoch, va_loss)
            if stopper.best_epoch == epoch:
                best_state = model.state()
            report.stopped_epoch = epoch
            if stop:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    model.load_state(best_state)
    report.best_epoch = stopper.best_epoch
    report.best_validation_loss = stopper.best
    report.wall_time = time.perf_counter() - t0
    return model, report
