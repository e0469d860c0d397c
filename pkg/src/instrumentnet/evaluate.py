"""Precision/recall/F1 bookkeeping for multi-label excerpt predictions."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import network as N
from .aggregate import WindowPredictions, aggregate, predict_excerpt, threshold_grid, threshold_labels
from .dataset import INSTRUMENTS
from .dsp import MelConfig, MelSpectrogram, preprocess

log = logging.getLogger(__name__)

METRIC_KEYS = ("micro_precision", "micro_recall", "micro_f1", "macro_precision", "macro_recall", "macro_f1")


def safe_div(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


def f1_score(p: float, r: float) -> float:
    """Harmonic mean of precision and recall, 0 when both are 0."""
    return safe_div(2.0 * p * r, p + r)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = safe_div(tp, tp + fp)
    r = safe_div(tp, tp + fn)
    return p, r, f1_score(p, r)


@dataclass
class ClassCounts:
    vocabulary: tuple[str, ...] = INSTRUMENTS
    tp: np.ndarray = None  # type: ignore[assignment]
    fp: np.ndarray = None  # type: ignore[assignment]
    fn: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        n = len(self.vocabulary)
        for name in ("tp", "fp", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n, dtype=np.int64))
        self._index = {lab: i for i, lab in enumerate(self.vocabulary)}

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise ValueError(f"label {label!r} is not in the vocabulary") from None

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(self.vocabulary, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def active(self) -> np.ndarray:
        """Classes that were annotated or predicted at least once."""
        return (self.tp + self.fp + self.fn) > 0


def accumulate(predicted: Iterable[str], annotated: Iterable[str], counts: ClassCounts) -> ClassCounts:
    pred = {counts.index(x) for x in predicted}
    gold = {counts.index(x) for x in annotated}
    for i in pred & gold:
        counts.tp[i] += 1
    for i in pred - gold:
        counts.fp[i] += 1
    for i in gold - pred:
        counts.fn[i] += 1
    return counts


@dataclass
class EvalReport:
    counts: ClassCounts
    micro: tuple[float, float, float]
    macro: tuple[float, float, float]
    per_class: dict[str, tuple[float, float, float]]
    n_excerpts: int = 0
    skipped: int = 0
    strategy: str = "S2"
    threshold: float = 0.5
    runs: dict | None = None

    def metrics(self) -> dict[str, float]:
        return dict(zip(METRIC_KEYS, (*self.micro, *self.macro)))

    def to_dict(self) -> dict:
        out = {
            "strategy": self.strategy,
            "threshold": self.threshold,
            "n_excerpts": self.n_excerpts,
            "skipped": self.skipped,
            "micro": dict(zip(("precision", "recall", "f1"), self.micro)),
            "macro": dict(zip(("precision", "recall", "f1"), self.macro)),
            "per_class": {
                lab: {"precision": p, "recall": r, "f1": f,
                      "tp": int(self.counts.tp[i]), "fp": int(self.counts.fp[i]), "fn": int(self.counts.fn[i])}
                for i, (lab, (p, r, f)) in enumerate(self.per_class.items())
            },
        }
        if self.runs is not None:
            out["runs"] = self.runs
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"{'class':<8}{'P':>8}{'R':>8}{'F1':>8}{'tp':>6}{'fp':>6}{'fn':>6}"]
        for i, (lab, (p, r, f)) in enumerate(self.per_class.items()):
            c = self.counts
            lines.append(f"{lab:<8}{p:8.3f}{r:8.3f}{f:8.3f}{c.tp[i]:6d}{c.fp[i]:6d}{c.fn[i]:6d}")
        lines.append(f"{'micro':<8}{self.micro[0]:8.3f}{self.micro[1]:8.3f}{self.micro[2]:8.3f}")
        lines.append(f"{'macro':<8}{self.macro[0]:8.3f}{self.macro[1]:8.3f}{self.macro[2]:8.3f}")
        return "\n".join(lines) + "\n"


def micro_macro(counts: ClassCounts) -> EvalReport:
    """Micro from pooled counts; macro as the unweighted mean of per-class P, R and F1.

    Macro averages run over the classes that occur in the predictions or the
    annotations; with none, every metric is 0.
    """
    micro = prf(counts.tp.sum(), counts.fp.sum(), counts.fn.sum())
    per_class = {lab: prf(counts.tp[i], counts.fp[i], counts.fn[i]) for i, lab in enumerate(counts.vocabulary)}
    active = counts.active()
    if active.any():
        table = np.array(list(per_class.values()))[active]
        macro = tuple(float(v) for v in table.mean(axis=0))
    else:
        macro = (0.0, 0.0, 0.0)
    return EvalReport(counts, tuple(float(v) for v in micro), macro, per_class)


# ---------------------------------------------------------------------------
# test-set evaluation


@dataclass
class ExcerptPrediction:
    name: str
    windows: WindowPredictions
    annotated: tuple[str, ...]


@dataclass
class PredictionSet:
    items: list[ExcerptPrediction] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


def _excerpt_source(item):
    """Accept ``(mel_or_path, labels)`` pairs or manifest entries."""
    if hasattr(item, "audio_path"):
        return item.audio_path, tuple(item.labels)
    source, labels = item
    return source, tuple(labels)


def collect_predictions(model: N.Model, testset: Sequence, config: MelConfig = MelConfig()) -> PredictionSet:
    """Window-level outputs for every excerpt; unreadable excerpts are skipped with a warning."""
    out = PredictionSet()
    for k, item in enumerate(testset):
        source, labels = _excerpt_source(item)
        name = str(source) if not isinstance(source, MelSpectrogram) else f"excerpt_{k:05d}"
        try:
            mel = source if isinstance(source, MelSpectrogram) else preprocess(source, config)
            windows = predict_excerpt(model, mel)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", name, exc)
            out.skipped.append(name)
            continue
        out.items.append(ExcerptPrediction(name, windows, labels))
    return out


def evaluate_predictions(preds: PredictionSet, strategy: str = "S2", theta: float = 0.5) -> EvalReport:
    counts = ClassCounts()
    for item in preds.items:
        predicted = threshold_labels(aggregate(item.windows, strategy), theta)
        accumulate(predicted, item.annotated, counts)
    report = micro_macro(counts)
    report.n_excerpts = len(preds.items)
    report.skipped = len(preds.skipped)
    report.strategy = strategy.upper()
    report.threshold = theta
    return report


def evaluate_testset(model: N.Model, testset: Sequence, strategy: str = "S2", theta: float = 0.5,
                     config: MelConfig = MelConfig()) -> EvalReport:
    if not len(testset):
        raise ValueError("test set is empty")
    return evaluate_predictions(collect_predictions(model, testset, config), strategy, theta)


def sweep(model: N.Model | None, testset: Sequence | PredictionSet, strategy: str = "S2",
          thresholds: Sequence[float] | None = None) -> list[EvalReport]:
    """One report per threshold of the strategy's grid; the model runs once per excerpt."""
    preds = testset if isinstance(testset, PredictionSet) else collect_predictions(model, testset)
    grid = threshold_grid(strategy) if thresholds is None else thresholds
    return [evaluate_predictions(preds, strategy, t) for t in grid]


def sweep_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["theta", "microP", "microR", "microF1", "macroP", "macroR", "macroF1"])
    for r in reports:
        writer.writerow([f"{r.threshold:.2f}", *(f"{v:.6f}" for v in (*r.micro, *r.macro))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# repeated experiments


class RepeatRunError(RuntimeError):
    def __init__(self, message: str, partial: list[EvalReport]):
        super().__init__(message)
        self.partial = partial


def run_statistics(reports: Sequence[EvalReport]) -> dict[str, dict[str, float]]:
    """Mean and sample standard deviation of every headline metric."""
    table = np.array([[r.metrics()[k] for k in METRIC_KEYS] for r in reports])
    ddof = 1 if len(reports) > 1 else 0
    return {k: {"mean": float(table[:, i].mean()), "std": float(table[:, i].std(ddof=ddof))}
            for i, k in enumerate(METRIC_KEYS)}


def derive_seeds(seed: int, n_runs: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_runs)]


def repeat_runs(run_once: Callable[[int, int], EvalReport], seed: int, n_runs: int = 3,
                seeds: Sequence[int] | None = None) -> tuple[list[EvalReport], dict]:
    """Call ``run_once(run_index, seed)`` for distinct derived seeds and summarise.

    ``run_once`` trains and evaluates one model. If a run raises, the reports
    gathered so far are attached to the :class:`RepeatRunError`.
    """
    if n_runs < 2:
        raise ValueError("repeat_runs needs at least two runs")
    seeds = derive_seeds(seed, n_runs) if seeds is None else list(seeds)
    reports: list[EvalReport] = []
    for k, s in enumerate(seeds):
        try:
            reports.append(run_once(k, s))
        except Exception as exc:
            raise RepeatRunError(f"run {k + 1}/{n_runs} failed: {exc}", reports) from exc
    return reports, run_statistics(reports)


def write_report(report: EvalReport, out_dir, stem: str = "report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js = out_dir / f"{stem}.json"
    txt = out_dir / f"{stem}.txt"
    js.write_text(report.to_json())
    txt.write_text(report.to_text())
    return js, txt
