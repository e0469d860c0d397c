"""The four-block ConvNet: construction, forward/backward passes and persistence."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels as K
from .kernels import ActivationKind, Parameter

N_CLASSES = 11
MEL_BINS = 128
CHANNELS = (32, 64, 128, 256)
HIDDEN = 1024
CONV_DROPOUT = 0.25
DENSE_DROPOUT = 0.5
PRELU_INIT = 0.25

MODEL_MAGIC = b"ICNN"
MODEL_VERSION = 1
_ACT_CODES = {"tanh": 0, "relu": 1, "lrelu": 2, "prelu": 3}
_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class ModelFormatError(ValueError):
    """Base class for unreadable model files."""


class ModelVersionError(ModelFormatError):
    pass


class ModelTruncatedError(ModelFormatError):
    pass


class ModelIntegrityError(ModelFormatError):
    """CRC32 of the payload does not match the stored checksum."""


@dataclass(frozen=True)
class ArchitectureSpec:
    activation: ActivationKind = field(default_factory=ActivationKind)
    input_frames: int = 43
    mel_bins: int = MEL_BINS
    n_classes: int = N_CLASSES
    channels: tuple = CHANNELS
    hidden: int = HIDDEN

    def __post_init__(self):
        if self.input_frames < 1:
            raise ValueError(f"analysis window must have at least one frame, got {self.input_frames}")
        if self.mel_bins < 1:
            raise ValueError("mel_bins must be positive")


def stage_dims(frames: int, bins: int = MEL_BINS):
    """Spatial size after each (conv, conv, pool) block; the last block is not pooled."""
    dims = []
    h, w = frames, bins
    for block in range(len(CHANNELS)):
        h, w = h + 4, w + 4
        if block < len(CHANNELS) - 1:
            h, w = (h - 3) // 3 + 1, (w - 3) // 3 + 1
        dims.append((h, w))
    return dims


def shape_trace(spec: ArchitectureSpec) -> list[tuple[tuple[int, ...], str]]:
    """Per-layer output shapes (filters x time x frequency), as in the layer table."""
    h, w = spec.input_frames, spec.mel_bins
    rows = [((1, h, w), "mel-spectrogram")]
    for b, c in enumerate(spec.channels):
        for _ in range(2):
            h, w = h + 2, w + 2
            rows.append(((c, h, w), f"3 x 3 convolution, {c} filters"))
        if b < len(spec.channels) - 1:
            h, w = (h - 3) // 3 + 1, (w - 3) // 3 + 1
            rows.append(((c, h, w), "3 x 3 max-pooling"))
            rows.append(((c, h, w), f"dropout ({CONV_DROPOUT:.2f})"))
    rows.append(((spec.channels[-1], 1, 1), "global max-pooling"))
    rows.append(((spec.hidden,), "flattened and fully connected"))
    rows.append(((spec.hidden,), f"dropout ({DENSE_DROPOUT:.2f})"))
    rows.append(((spec.n_classes,), "sigmoid"))
    return rows


class Model:
    """Parameters of one network instance, in a fixed order."""

    def __init__(self, spec: ArchitectureSpec, parameters: list[Parameter], rng_seed: int = 0):
        self.spec = spec
        self.parameters = list(parameters)
        self.rng_seed = int(rng_seed)
        self._by_name = {p.name: p for p in self.parameters}

    def __getitem__(self, name: str) -> Parameter:
        return self._by_name[name]

    def n_parameters(self) -> int:
        return int(sum(p.value.size for p in self.parameters))

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters}

    def load_state(self, state: dict[str, np.ndarray]):
        for p in self.parameters:
            p.value[...] = state[p.name]

    def zero_grad(self):
        for p in self.parameters:
            p.grad = None

    def forward(self, mel, training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        return forward(self, mel, training=training, rng=rng)


def parameter_shapes(spec: ArchitectureSpec) -> list[tuple[str, tuple[int, ...]]]:
    prelu = spec.activation.kind == "prelu"
    shapes = []
    c_prev = 1
    for b, c in enumerate(spec.channels):
        for k in (1, 2):
            shapes.append((f"conv{b + 1}_{k}.w", (c, c_prev, 3, 3)))
            shapes.append((f"conv{b + 1}_{k}.b", (c,)))
            if prelu:
                shapes.append((f"conv{b + 1}_{k}.alpha", (c,)))
            c_prev = c
    shapes.append(("fc1.w", (spec.hidden, c_prev)))
    shapes.append(("fc1.b", (spec.hidden,)))
    if prelu:
        shapes.append(("fc1.alpha", (spec.hidden,)))
    shapes.append(("fc2.w", (spec.n_classes, spec.hidden)))
    shapes.append(("fc2.b", (spec.n_classes,)))
    return shapes


def parameter_count(spec: ArchitectureSpec) -> int:
    return int(sum(np.prod(s) for _, s in parameter_shapes(spec)))


def build_model(activation: ActivationKind | None = None, input_frames: int = 43,
                rng: np.random.Generator | int | None = 0) -> Model:
    """Glorot-uniform weights, zero biases, PReLU slopes at 0.25."""
    activation = ActivationKind() if activation is None else activation
    spec = ArchitectureSpec(activation=activation, input_frames=input_frames)
    seed = rng if isinstance(rng, (int, np.integer)) else 0
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(seed)
    params = []
    for name, shape in parameter_shapes(spec):
        if name.endswith(".w"):
            value = K.glorot_uniform_init(shape, gen)
        elif name.endswith(".alpha"):
            value = np.full(shape, PRELU_INIT if activation.kind == "prelu" else activation.alpha)
        else:
            value = np.zeros(shape)
        params.append(Parameter(value, name=name))
    return Model(spec, params, rng_seed=int(seed))


# ---------------------------------------------------------------------------
# passes


def _as_batch(model: Model, mel) -> np.ndarray:
    x = np.asarray(getattr(mel, "values", mel), dtype=K.DTYPE)
    if x.ndim == 2:
        x = x[None]
    expected = (model.spec.input_frames, model.spec.mel_bins)
    if x.ndim != 3 or x.shape[1:] != expected:
        raise K.ShapeError(f"model expects windows of {expected}, got {x.shape}")
    return x


def _alpha(model: Model, name: str):
    if model.spec.activation.kind != "prelu":
        return None
    return model[name].value


def forward_batch(model: Model, x: np.ndarray, training: bool = False,
                  rng: np.random.Generator | None = None, keep: bool = False,
                  taps: dict | None = None):
    """Run ``(N, frames, bins)`` through the network, returning ``(N, n_classes)`` sigmoids.

    With ``keep`` the per-layer caches are returned as a second value for
    :func:`backward_batch`. ``taps``, when given, collects each block's output.
    """
    act = model.spec.activation
    caches = []
    h = x[None]  # (1, N, T, F)
    n_blocks = len(model.spec.channels)
    for b in range(n_blocks):
        for k in (1, 2):
            tag = f"conv{b + 1}_{k}"
            h, c_conv = K.conv2d_forward(h, model[tag + ".w"].value, model[tag + ".b"].value,
                                         need_dx=(b, k) != (0, 1))
            h, c_act = K.activate_forward(h, act, _alpha(model, tag + ".alpha"), inplace=True)
            caches.append(("conv", tag, c_conv, c_act))
        if b < n_blocks - 1:
            h, c_pool = K.maxpool_forward(h)
            h, mask = K.dropout_forward(h, CONV_DROPOUT, training, rng)
            caches.append(("pool", c_pool, mask))
        if taps is not None:
            taps[f"block{b + 1}"] = h.transpose(1, 0, 2, 3).copy()
    h, c_gmp = K.global_max_pool_forward(h)
    caches.append(("gmp", c_gmp))
    if taps is not None:
        taps["global_pool"] = h.copy()
    h, c_fc1 = K.dense_forward(h, model["fc1.w"].value, model["fc1.b"].value)
    h, c_act = K.activate_forward(h, act, _alpha(model, "fc1.alpha"), inplace=True)
    h, mask = K.dropout_forward(h, DENSE_DROPOUT, training, rng)
    caches.append(("fc1", c_fc1, c_act, mask))
    if taps is not None:
        taps["fc1"] = h.copy()
    z, c_fc2 = K.dense_forward(h, model["fc2.w"].value, model["fc2.b"].value)
    y = K.sigmoid(z)
    caches.append(("fc2", c_fc2, y))
    if keep:
        return y, caches
    return y


def backward_batch(model: Model, dy: np.ndarray, caches) -> dict[str, np.ndarray]:
    """Gradients of every parameter given ``dloss/dsigmoid`` for the batch."""
    grads: dict[str, np.ndarray] = {}
    prelu = model.spec.activation.kind == "prelu"
    _, c_fc2, y = caches[-1]
    dz = K.sigmoid_backward(dy, y)
    dh, grads["fc2.w"], grads["fc2.b"] = K.dense_backward(dz, c_fc2)
    _, c_fc1, c_act, mask = caches[-2]
    dh = K.dropout_backward(dh, mask)
    dh, dalpha = K.activate_backward(dh, c_act, inplace=True)
    if prelu:
        grads["fc1.alpha"] = dalpha
    dh, grads["fc1.w"], grads["fc1.b"] = K.dense_backward(dh, c_fc1)
    dh = K.global_max_pool_backward(dh, caches[-3][1])
    for entry in reversed(caches[:-3]):
        if entry[0] == "pool":
            _, c_pool, mask = entry
            dh = K.dropout_backward(dh, mask)
            dh = K.maxpool_backward(dh, c_pool)
        else:
            _, tag, c_conv, c_act = entry
            dh, dalpha = K.activate_backward(dh, c_act, inplace=True)
            if prelu:
                grads[tag + ".alpha"] = dalpha
            dh, grads[tag + ".w"], grads[tag + ".b"] = K.conv2d_backward(dh, c_conv)
    return grads


def forward(model: Model, mel, training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Sigmoid outputs for one window (``(n_classes,)``) or a stack of windows (``(N, n_classes)``)."""
    x = _as_batch(model, mel)
    y = forward_batch(model, x, training=training, rng=rng)
    single = np.asarray(getattr(mel, "values", mel)).ndim == 2
    return y[0] if single else y


def activations(model: Model, mel) -> dict[str, np.ndarray]:
    """Intermediate block outputs for one window, inference mode."""
    taps: dict[str, np.ndarray] = {}
    forward_batch(model, _as_batch(model, mel), training=False, taps=taps)
    return {k: v[0] for k, v in taps.items()}


# ---------------------------------------------------------------------------
# persistence
#
# layout (little-endian):
#   "ICNN" u32 version
#   u8 activation code, f64 alpha, u32 frames, u32 bins, u32 classes, u32 hidden,
#   u32 n_channels, n_channels * u32, i64 seed, u8 float width, u32 n_params
#   per parameter: u16 name length, name, u8 ndim, ndim * u32, raw floats
#   u32 CRC32 of everything above


def _pack_model(model: Model, float_width: int) -> bytes:
    spec = model.spec
    dt = _DTYPE_CODES[float_width]
    out = bytearray(MODEL_MAGIC)
    out += struct.pack("<I", MODEL_VERSION)
    out += struct.pack("<BdIIII", _ACT_CODES[spec.activation.kind], spec.activation.alpha,
                       spec.input_frames, spec.mel_bins, spec.n_classes, spec.hidden)
    out += struct.pack("<I", len(spec.channels))
    out += struct.pack(f"<{len(spec.channels)}I", *spec.channels)
    out += struct.pack("<qBI", model.rng_seed, float_width, len(model.parameters))
    for p in model.parameters:
        name = p.name.encode()
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<B", p.value.ndim)
        out += struct.pack(f"<{p.value.ndim}I", *p.value.shape)
        out += p.value.astype(dt).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_model(model: Model, path, float_width: int = 8) -> Path:
    """Write ``model``; ``float_width=4`` stores compact (lossy) 32-bit weights."""
    if float_width not in _DTYPE_CODES:
        raise ValueError("float_width must be 4 or 8")
    path = Path(path)
    path.write_bytes(_pack_model(model, float_width))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ModelTruncatedError("model file ends prematurely")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelTruncatedError("model file ends prematurely")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ModelTruncatedError("model file too short")
    if data[:4] != MODEL_MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    r = _Reader(data[:-4])
    r.pos = 4
    (version,) = r.take("<I")
    if version != MODEL_VERSION:
        raise ModelVersionError(f"model format version {version}, expected {MODEL_VERSION}")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ModelIntegrityError("model checksum mismatch")
    act_code, alpha, frames, bins, classes, hidden = r.take("<BdIIII")
    (n_ch,) = r.take("<I")
    channels = r.take(f"<{n_ch}I")
    seed, width, n_params = r.take("<qBI")
    kind = {v: k for k, v in _ACT_CODES.items()}[act_code]
    spec = ArchitectureSpec(activation=ActivationKind(kind, alpha), input_frames=frames,
                            mel_bins=bins, n_classes=classes, channels=tuple(channels), hidden=hidden)
    dt = _DTYPE_CODES[width]
    params = []
    for _ in range(n_params):
        (n_len,) = r.take("<H")
        name = r.raw(n_len).decode()
        (ndim,) = r.take("<B")
        shape = r.take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(r.raw(count * dt.itemsize), dtype=dt).reshape(shape)
        params.append(Parameter(values.astype(K.DTYPE), name=name))
    if r.pos != len(r.data):
        raise ModelFormatError("trailing bytes after parameters")
    expected = [n for n, _ in parameter_shapes(spec)]
    if [p.name for p in params] != expected:
        raise ModelFormatError("parameter list does not match the stored architecture")
    return Model(spec, params, rng_seed=seed)
