"""Audio front end: WAV decoding, mono 22.05 kHz conversion and log-mel spectrograms."""
from __future__ import annotations

import struct
import wave
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

TARGET_RATE = 22050
SOURCE_RATE = 44100
LOG_FLOOR = 1e-7
RESAMPLE_TAPS = 255
RESAMPLE_BETA = 8.6

MELS_MAGIC = b"MELS"
MELS_VERSION = 1


class WavError(ValueError):
    """Base class for undecodable audio files."""


class MalformedWavError(WavError):
    pass


class UnsupportedCodecError(WavError):
    pass


class UnsupportedRateError(ValueError):
    pass


class ClipTooShortError(ValueError):
    pass


@dataclass
class AudioClip:
    """Samples in ``[-1, 1]``; shape ``(n,)`` for mono or ``(n, channels)``."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim not in (1, 2):
            raise ValueError("samples must be (n,) or (n, channels)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")

    @property
    def channel_count(self) -> int:
        return 1 if self.samples.ndim == 1 else self.samples.shape[1]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    fft_size: int = 1024
    hop_size: int = 512
    mel_bins: int = 128
    target_rate: int = TARGET_RATE
    fmin: float = 0.0
    fmax: float | None = None

    def __post_init__(self):
        if self.fmax is None:
            object.__setattr__(self, "fmax", self.target_rate / 2)
        if not 0 < self.hop_size <= self.fft_size:
            raise ValueError("hop_size must be in (0, fft_size]")
        if self.mel_bins < 1:
            raise ValueError("mel_bins must be >= 1")
        if not 0 <= self.fmin < self.fmax <= self.target_rate / 2:
            raise ValueError("need 0 <= fmin < fmax <= target_rate / 2")

    def frames_for(self, num_samples: int) -> int:
        return num_samples // self.hop_size

    def frames_for_seconds(self, seconds: float) -> int:
        return self.frames_for(int(round(seconds * self.target_rate)))


@dataclass
class MelSpectrogram:
    """Natural-log mel magnitudes, ``values`` shaped ``(frames, mel_bins)``."""

    values: np.ndarray
    config: MelConfig = field(default_factory=MelConfig)

    @property
    def frame_count(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self):
        return self.values.shape

    def window(self, start: int, frames: int) -> "MelSpectrogram":
        return MelSpectrogram(self.values[start:start + frames], self.config)


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path) -> AudioClip:
    """Decode a PCM (8/16/24/32-bit int) or IEEE-float WAV into ``[-1, 1]`` floats."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise MalformedWavError(f"{path}: short fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == 0xFFFE and size >= 26:
                # WAVE_FORMAT_EXTENSIBLE: the real codec is the first word of the subformat GUID
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise MalformedWavError(f"{path}: missing fmt or data chunk")
    codec, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate <= 0 or block_align == 0:
        raise MalformedWavError(f"{path}: invalid fmt fields")
    if codec == 1 and bits in (8, 16, 24, 32):
        samples = _decode_pcm(payload, bits)
    elif codec == 3 and bits in (32, 64):
        samples = np.frombuffer(payload[:len(payload) - len(payload) % (bits // 8)],
                                dtype=f"<f{bits // 8}").astype(np.float64)
    else:
        raise UnsupportedCodecError(f"{path}: codec {codec} with {bits} bits is not supported")
    n = len(samples) // channels
    samples = samples[:n * channels].reshape(n, channels)
    if channels == 1:
        samples = samples[:, 0]
    return AudioClip(np.clip(samples, -1.0, 1.0), rate)


def _decode_pcm(payload: bytes, bits: int) -> np.ndarray:
    width = bits // 8
    payload = payload[:len(payload) - len(payload) % width]
    if bits == 8:
        return (np.frombuffer(payload, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    if bits == 24:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        return ints / float(1 << 23)
    ints = np.frombuffer(payload, dtype=f"<i{width}")
    return ints.astype(np.float64) / float(1 << (bits - 1))


def write_wav(path, samples: np.ndarray, sample_rate: int) -> Path:
    """Write 16-bit PCM; ``samples`` is ``(n,)`` or ``(n, channels)`` in ``[-1, 1]``."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    ints = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    path = Path(path)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(samples.shape[1])
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(ints.tobytes())
    return path


# ---------------------------------------------------------------------------
# waveform preparation


@lru_cache(maxsize=None)
def halfband_lowpass(taps: int = RESAMPLE_TAPS, beta: float = RESAMPLE_BETA) -> np.ndarray:
    """Kaiser-windowed sinc with cutoff at half the Nyquist frequency, unit DC gain."""
    n = np.arange(taps) - (taps - 1) / 2
    h = 0.5 * np.sinc(0.5 * n) * np.kaiser(taps, beta)
    return h / h.sum()


def downmix(samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    return samples if samples.ndim == 1 else samples.mean(axis=1)


def decimate2(x: np.ndarray) -> np.ndarray:
    """Anti-aliased factor-2 decimation; returns ``len(x) // 2`` samples."""
    filtered = np.convolve(x, halfband_lowpass(), mode="same")
    return filtered[:2 * (len(x) // 2):2].copy()


def prepare_waveform(clip: AudioClip, target_rate: int = TARGET_RATE) -> AudioClip:
    """Mono, 22.05 kHz, peak-normalised; an all-zero clip is returned unnormalised."""
    mono = downmix(clip.samples)
    if clip.sample_rate == 2 * target_rate:
        mono = decimate2(mono)
    elif clip.sample_rate != target_rate:
        raise UnsupportedRateError(
            f"sample rate {clip.sample_rate} Hz; expected {2 * target_rate} or {target_rate}")
    peak = np.max(np.abs(mono)) if mono.size else 0.0
    if peak > 0:
        mono = mono / peak
    return AudioClip(mono, target_rate)


# ---------------------------------------------------------------------------
# spectrogram


@lru_cache(maxsize=None)
def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_magnitude(clip: AudioClip | np.ndarray, config: MelConfig = MelConfig()) -> np.ndarray:
    """Non-centred magnitude STFT, ``(n // hop, fft_size // 2 + 1)``.

    Frame ``t`` covers samples ``[t * hop, t * hop + fft_size)``; frames that run
    past the end are zero-padded.
    """
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft_magnitude expects a mono clip")
    if len(x) < config.fft_size:
        raise ClipTooShortError(f"{len(x)} samples is shorter than one {config.fft_size}-sample window")
    n_frames = config.frames_for(len(x))
    need = (n_frames - 1) * config.hop_size + config.fft_size
    padded = np.zeros(max(need, len(x)))
    padded[:len(x)] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, config.fft_size)[::config.hop_size][:n_frames]
    return np.abs(np.fft.rfft(frames * hann(config.fft_size), axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(config: MelConfig = MelConfig()) -> np.ndarray:
    """Unnormalised triangular filters, ``(mel_bins, fft_size // 2 + 1)``, peaks of height 1."""
    n_bins = config.fft_size // 2 + 1
    freqs = np.arange(n_bins) * config.target_rate / config.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.mel_bins + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_project_log(spec: np.ndarray, config: MelConfig = MelConfig()) -> MelSpectrogram:
    spec = np.asarray(spec, dtype=np.float64)
    if spec.ndim != 2 or spec.shape[1] != config.fft_size // 2 + 1:
        raise ValueError(f"expected (frames, {config.fft_size // 2 + 1}) magnitudes, got {spec.shape}")
    mel = spec @ mel_filterbank(config).T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)), config)


def clip_to_mel(clip: AudioClip, config: MelConfig = MelConfig()) -> MelSpectrogram:
    prepared = prepare_waveform(clip, config.target_rate)
    return mel_project_log(stft_magnitude(prepared, config), config)


def preprocess(path, config: MelConfig = MelConfig()) -> MelSpectrogram:
    """WAV file to log-mel spectrogram."""
    return clip_to_mel(load_wav(path), config)


# ---------------------------------------------------------------------------
# mel cache files
#
# "MELS" u32 version u32 frames u32 bins
# u32 fft_size u32 hop_size u32 mel_bins u32 target_rate f64 fmin f64 fmax
# frames * bins little-endian float32, row-major

_MELS_HEADER = "<4sIII IIII dd".replace(" ", "")


def save_mel(mel: MelSpectrogram, path) -> Path:
    c = mel.config
    header = struct.pack(_MELS_HEADER, MELS_MAGIC, MELS_VERSION, mel.values.shape[0], mel.values.shape[1],
                         c.fft_size, c.hop_size, c.mel_bins, c.target_rate, c.fmin, c.fmax)
    path = Path(path)
    path.write_bytes(header + mel.values.astype("<f4").tobytes())
    return path


def load_mel(path) -> MelSpectrogram:
    data = Path(path).read_bytes()
    size = struct.calcsize(_MELS_HEADER)
    if len(data) < size:
        raise ValueError(f"{path}: truncated mel cache")
    magic, version, frames, bins, fft, hop, mels, rate, fmin, fmax = struct.unpack_from(_MELS_HEADER, data)
    if magic != MELS_MAGIC:
        raise ValueError(f"{path}: not a mel cache file")
    if version != MELS_VERSION:
        raise ValueError(f"{path}: mel cache version {version}, expected {MELS_VERSION}")
    body = data[size:]
    if len(body) != frames * bins * 4:
        raise ValueError(f"{path}: payload size does not match {frames}x{bins}")
    values = np.frombuffer(body, dtype="<f4").reshape(frames, bins).astype(np.float64)
    config = MelConfig(fft, hop, mels, rate, fmin, fmax)
    return MelSpectrogram(values, config)


def config_dict(config: MelConfig) -> dict:
    return asdict(config)
