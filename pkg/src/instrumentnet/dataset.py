"""IRMAS-layout corpora: scanning real trees and rendering a synthetic stand-in."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import write_wav

log = logging.getLogger(__name__)

INSTRUMENTS = ("cel", "cla", "flu", "acg", "elg", "org", "pia", "sax", "tru", "vio", "voi")
INSTRUMENT_NAMES = ("cello", "clarinet", "flute", "acoustic guitar", "electric guitar", "organ",
                    "piano", "saxophone", "trumpet", "violin", "voice")
LABEL_INDEX = {abbr: i for i, abbr in enumerate(INSTRUMENTS)}
DEFAULT_ALIASES = {"gac": "acg", "gel": "elg"}
# per-class excerpt counts of the published IRMAS release, for sanity checks on a real download
IRMAS_TRAINING_COUNTS = dict(zip(INSTRUMENTS, (388, 505, 451, 637, 760, 682, 721, 626, 577, 580, 778)))
IRMAS_TESTING_COUNTS = dict(zip(INSTRUMENTS, (111, 62, 163, 535, 942, 361, 995, 326, 167, 211, 1044)))
MAX_HARMONICS = 32


class DatasetError(ValueError):
    pass


class UnknownLabelError(DatasetError):
    pass


def canonical_label(text: str, aliases: dict[str, str] | None = None) -> str:
    """Map an abbreviation (or a known alias) onto the canonical 11-label vocabulary."""
    key = text.strip().lower()
    key = {**DEFAULT_ALIASES, **(aliases or {})}.get(key, key)
    if key not in LABEL_INDEX:
        raise UnknownLabelError(f"unknown instrument label {text!r}")
    return key


def label_vector(labels) -> np.ndarray:
    vec = np.zeros(len(INSTRUMENTS))
    for lab in labels:
        vec[LABEL_INDEX[lab]] = 1.0
    return vec


@dataclass(frozen=True)
class LabeledExcerpt:
    audio_path: str
    labels: tuple[str, ...]
    duration_seconds: float
    split: str = "train"

    def to_json(self) -> str:
        return json.dumps({"path": self.audio_path, "labels": list(self.labels),
                           "duration": round(self.duration_seconds, 6), "split": self.split})

    @classmethod
    def from_json(cls, line: str) -> "LabeledExcerpt":
        d = json.loads(line)
        return cls(d["path"], tuple(d["labels"]), float(d["duration"]), d["split"])


@dataclass
class DatasetManifest:
    split: str
    excerpts: list[LabeledExcerpt] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        out = {abbr: 0 for abbr in INSTRUMENTS}
        for ex in self.excerpts:
            for lab in ex.labels:
                out[lab] += 1
        return out

    def __len__(self):
        return len(self.excerpts)

    def __iter__(self):
        return iter(self.excerpts)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text("".join(ex.to_json() + "\n" for ex in self.excerpts))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        excerpts = [LabeledExcerpt.from_json(ln) for ln in lines]
        split = excerpts[0].split if excerpts else "train"
        return cls(split, excerpts)


def count_mismatches(manifest: DatasetManifest, expected: dict[str, int]) -> dict[str, tuple[int, int]]:
    """``{label: (found, expected)}`` for every class whose count differs."""
    found = manifest.counts
    return {lab: (found[lab], n) for lab, n in expected.items() if found[lab] != n}


def wav_duration(path) -> float:
    """Duration from the RIFF header alone, without decoding samples."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
            raise DatasetError(f"{path}: not a RIFF/WAVE file")
        rate = block = None
        while True:
            hdr = fh.read(8)
            if len(hdr) < 8:
                break
            cid, size = struct.unpack("<4sI", hdr)
            if cid == b"fmt ":
                body = fh.read(size + (size & 1))
                _, _, rate, _, block, _ = struct.unpack_from("<HHIIHH", body)
            elif cid == b"data":
                if not rate or not block:
                    break
                return size // block / rate
            else:
                fh.seek(size + (size & 1), 1)
    raise DatasetError(f"{path}: missing fmt or data chunk")


def scan_training(root, aliases: dict[str, str] | None = None) -> DatasetManifest:
    """One subdirectory per instrument; every WAV inside gets that single label."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"training root {root} is not a directory")
    excerpts = []
    seen = set()
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        label = canonical_label(sub.name, aliases)
        wavs = sorted(sub.rglob("*.wav"))
        if not wavs:
            raise DatasetError(f"class directory {sub} holds no WAV files")
        seen.add(label)
        excerpts += [LabeledExcerpt(str(w), (label,), wav_duration(w), "train") for w in wavs]
    if not excerpts:
        raise DatasetError(f"no training excerpts under {root}")
    return DatasetManifest("train", excerpts)


def read_label_file(path, aliases: dict[str, str] | None = None) -> tuple[str, ...]:
    """Labels from a one-abbreviation-per-line file, deduplicated in canonical order."""
    found = set()
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        try:
            found.add(canonical_label(line, aliases))
        except UnknownLabelError:
            log.warning("%s: skipping unknown label %r", path, line.strip())
    if not found:
        raise DatasetError(f"{path}: no valid instrument label")
    return tuple(sorted(found, key=LABEL_INDEX.__getitem__))


def scan_testing(root, aliases: dict[str, str] | None = None) -> DatasetManifest:
    """Every WAV must have a same-stem ``.txt`` annotation next to it."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"testing root {root} is not a directory")
    excerpts = []
    for wav in sorted(root.rglob("*.wav")):
        txt = wav.with_suffix(".txt")
        if not txt.is_file():
            raise DatasetError(f"{wav} has no label file")
        excerpts.append(LabeledExcerpt(str(wav), read_label_file(txt, aliases), wav_duration(wav), "test"))
    if not excerpts:
        raise DatasetError(f"no testing excerpts under {root}")
    return DatasetManifest("test", excerpts)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class Timbre:
    f0_range: tuple[float, float]
    rolloff: float            # harmonic k has amplitude k ** -rolloff
    even_gain: float          # multiplier on even harmonics
    resonance: float          # centre of a spectral bump (Hz), 0 for none
    vibrato_rate: float
    vibrato_depth: float
    noise: float              # breath/bow noise relative to the tone
    attack: float             # seconds
    decay: float              # exponential decay rate per second; 0 = sustained
    tremolo: float = 0.0


# one recipe per canonical instrument; only the ordering matters for labels
TIMBRES = (
    Timbre((65, 260), 1.0, 1.0, 700, 5.5, 0.006, 0.02, 0.08, 0.0),            # cel
    Timbre((150, 700), 1.6, 0.08, 1500, 0.0, 0.0, 0.01, 0.04, 0.0),           # cla
    Timbre((260, 1200), 3.0, 0.6, 0, 4.5, 0.004, 0.15, 0.06, 0.0),            # flu
    Timbre((80, 400), 1.3, 1.0, 0, 0.0, 0.0, 0.0, 0.003, 4.5),                # acg
    Timbre((80, 500), 0.7, 1.0, 2500, 0.0, 0.0, 0.01, 0.005, 1.0),            # elg
    Timbre((60, 500), 0.4, 0.9, 0, 0.0, 0.0, 0.0, 0.01, 0.0, 6.0),            # org
    Timbre((55, 1000), 1.8, 1.0, 0, 0.0, 0.0, 0.0, 0.002, 3.0),               # pia
    Timbre((100, 600), 0.9, 0.8, 1800, 5.0, 0.01, 0.05, 0.05, 0.0),           # sax
    Timbre((160, 800), 0.5, 1.0, 1200, 0.0, 0.0, 0.01, 0.03, 0.0),            # tru
    Timbre((190, 1300), 1.1, 1.0, 3000, 6.5, 0.012, 0.04, 0.06, 0.0),         # vio
    Timbre((90, 550), 1.4, 1.0, 900, 5.0, 0.02, 0.06, 0.04, 0.0, 3.0),        # voi
)


ARRANGEMENTS = ("turns", "simultaneous")
LEAD_DUCK_DB = -20.0


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 4
    train_per_class: int = 8
    n_test: int = 8
    seed: int = 7
    sample_rate: int = 44100
    channels: int = 2
    train_seconds: float = 3.0
    test_seconds: tuple[float, float] = (5.0, 20.0)
    max_sources: int = 3
    predominant_db: float = 6.0
    # "turns": predominant sources take the lead in consecutive sections and
    # stay 20 dB down elsewhere; "simultaneous": every source plays throughout
    arrangement: str = "turns"

    def __post_init__(self):
        if not 2 <= self.n_classes <= len(INSTRUMENTS):
            raise ValueError(f"n_classes must be in [2, {len(INSTRUMENTS)}]")
        if self.train_per_class < 1 or self.n_test < 0:
            raise ValueError("excerpt counts must be positive")
        if self.sample_rate not in (22050, 44100) or self.channels not in (1, 2):
            raise ValueError("sample_rate must be 22050 or 44100 and channels 1 or 2")
        if self.max_sources < 1:
            raise ValueError("max_sources must be at least 1")
        if self.arrangement not in ARRANGEMENTS:
            raise ValueError(f"arrangement must be one of {ARRANGEMENTS}")


def render_line(timbre: Timbre, seconds: float, sr: int, rng: np.random.Generator) -> np.ndarray:
    """A monophonic line of random notes played with ``timbre``, unit RMS."""
    n = int(round(seconds * sr))
    out = np.zeros(n)
    pos = 0
    lo, hi = np.log(timbre.f0_range[0]), np.log(timbre.f0_range[1])
    while pos < n:
        length = min(n - pos, int(rng.uniform(0.25, 0.7) * sr))
        t = np.arange(length) / sr
        f0 = np.exp(rng.uniform(lo, hi))
        inst = f0 * (1.0 + timbre.vibrato_depth * np.sin(2 * np.pi * timbre.vibrato_rate * t
                                                          + rng.uniform(0, 2 * np.pi)))
        phase = 2 * np.pi * np.cumsum(inst) / sr
        n_harm = max(1, min(MAX_HARMONICS, int(min(9000.0, 0.45 * sr) // f0)))
        k = np.arange(1, n_harm + 1)
        amp = k ** -timbre.rolloff
        amp[1::2] *= timbre.even_gain
        if timbre.resonance:
            amp *= 1.0 + 3.0 * np.exp(-0.5 * (np.log(k * f0 / timbre.resonance) / 0.25) ** 2)
        offsets = np.exp(1j * rng.uniform(0, 2 * np.pi, n_harm)) * amp
        step = np.exp(1j * phase)
        acc = np.ones(length, dtype=complex)
        tone = np.zeros(length)
        for h in range(n_harm):
            acc *= step
            tone += (acc * offsets[h]).imag
        if timbre.noise:
            noise = rng.standard_normal(length)
            noise = np.convolve(noise, np.ones(4) / 4, mode="same")
            tone = tone + timbre.noise * np.std(tone) * 4 * noise
        env = np.minimum(1.0, t / timbre.attack)
        if timbre.decay:
            env *= np.exp(-timbre.decay * t)
        if timbre.tremolo:
            env *= 1.0 + 0.3 * np.sin(2 * np.pi * timbre.tremolo * t)
        release = min(length, int(0.02 * sr))
        env[length - release:] *= np.linspace(1.0, 0.0, release)
        out[pos:pos + length] = tone * env
        pos += length
    rms = np.sqrt(np.mean(out ** 2))
    return out / rms if rms > 0 else out


def _mix(sources: list[np.ndarray], gains_db, channels: int, rng: np.random.Generator) -> np.ndarray:
    n = len(sources[0])
    mix = np.zeros((n, channels))
    for src, g in zip(sources, gains_db):
        pan = rng.uniform(0.25, 0.75) if channels == 2 else 0.5
        weights = np.array([1 - pan, pan]) * 2 if channels == 2 else np.array([1.0])
        mix += np.outer(src * 10 ** (g / 20), weights)
    mix += 10 ** (-45 / 20) * rng.standard_normal(mix.shape)
    return 0.5 * mix / np.max(np.abs(mix))


def lead_envelopes(n: int, leads: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """``(leads, n)`` gain curves: each lead is at full level in its own section, ducked elsewhere.

    Section lengths are drawn around ``n / leads``; section edges get 50 ms ramps.
    """
    shares = rng.uniform(0.7, 1.3, leads)
    edges = np.round(np.concatenate([[0], np.cumsum(shares / shares.sum())]) * n).astype(int)
    duck = 10 ** (LEAD_DUCK_DB / 20)
    env = np.full((leads, n), duck)
    ramp = max(1, int(0.05 * sr))
    for i in range(leads):
        on = np.zeros(n)
        on[edges[i]:edges[i + 1]] = 1.0
        on = np.convolve(on, np.ones(ramp) / ramp, mode="same")
        env[i] = duck + (1.0 - duck) * on
    return env


def predominant(gains_db, margin_db: float) -> list[int]:
    """Indices of sources within ``margin_db`` of the loudest (sources are unit RMS)."""
    top = max(gains_db)
    return [i for i, g in enumerate(gains_db) if g >= top - margin_db]


def synth_corpus(root, spec: SynthSpec = SynthSpec()) -> tuple[Path, Path]:
    """Render ``root/train/<abbr>/*.wav`` and ``root/test/*.wav`` + ``*.txt``.

    Training excerpts carry one instrument, sometimes with a quiet accompanying
    one well below the predominance margin. Test excerpts mix one to
    ``max_sources`` instruments; the label file lists every source whose level
    is within ``predominant_db`` of the loudest. With the ``"turns"``
    arrangement those predominant sources share the excerpt in sections, each
    leading in one and ducked by 20 dB in the others.
    """
    root = Path(root)
    classes = INSTRUMENTS[:spec.n_classes]
    seeds = np.random.SeedSequence(spec.seed).spawn(2)
    train_root, test_root = root / "train", root / "test"
    train_seqs = seeds[0].spawn(spec.n_classes * spec.train_per_class)
    for c, abbr in enumerate(classes):
        d = train_root / abbr
        d.mkdir(parents=True, exist_ok=True)
        for j in range(spec.train_per_class):
            rng = np.random.default_rng(train_seqs[c * spec.train_per_class + j])
            srcs = [render_line(TIMBRES[c], spec.train_seconds, spec.sample_rate, rng)]
            gains = [0.0]
            if rng.random() < 0.5:
                other = int(rng.choice([i for i in range(spec.n_classes) if i != c]))
                srcs.append(render_line(TIMBRES[other], spec.train_seconds, spec.sample_rate, rng))
                gains.append(rng.uniform(-26.0, -18.0))
            write_wav(d / f"{abbr}_{j:04d}.wav", _mix(srcs, gains, spec.channels, rng), spec.sample_rate)
    test_root.mkdir(parents=True, exist_ok=True)
    for j, seq in enumerate(seeds[1].spawn(spec.n_test)):
        rng = np.random.default_rng(seq)
        seconds = float(np.round(rng.uniform(*spec.test_seconds), 2))
        n_src = int(rng.integers(1, min(spec.max_sources, spec.n_classes) + 1))
        picks = [int(i) for i in rng.choice(spec.n_classes, size=n_src, replace=False)]
        gains = [0.0]
        for _ in picks[1:]:
            if rng.random() < 0.5:
                gains.append(rng.uniform(-3.0, 0.0))
            else:
                gains.append(rng.uniform(-22.0, -14.0))
        srcs = [render_line(TIMBRES[p], seconds, spec.sample_rate, rng) for p in picks]
        if spec.arrangement == "turns":
            leads = predominant(gains, spec.predominant_db)
            env = lead_envelopes(len(srcs[0]), len(leads), spec.sample_rate, rng)
            for k, i in enumerate(leads):
                srcs[i] = srcs[i] * env[k]
        stem = test_root / f"mix_{j:04d}"
        write_wav(stem.with_suffix(".wav"), _mix(srcs, gains, spec.channels, rng), spec.sample_rate)
        labels = sorted((classes[picks[i]] for i in predominant(gains, spec.predominant_db)),
                        key=LABEL_INDEX.__getitem__)
        stem.with_suffix(".txt").write_text("".join(f"{lab}\n" for lab in labels))
    return train_root, test_root
