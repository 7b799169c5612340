"""Fixed-point network simulator: the oracle a PNet server would evaluate.

Encoding
--------
A real value v is stored as ``round_half_even(v * 2**f)`` clamped to the
signed ``b``-bit range.  Activations carry the input's fractional bits
``f_act`` through the whole network and saturate at ``acc_bits`` (the
plaintext modulus of an FHE scheme is far wider than the weight format).
Each weight tensor has its own ``(b, f)``; a conv or linear product is at
scale ``2**(f_act + f_w)`` and is shifted back by ``f_w`` with
round-half-even.  Square products are shifted back by ``f_act``.  Average
pooling is an integer window sum times a quantized ``1/k**2``.

Only add, multiply and rescale are used, i.e. the op set available under
leveled homomorphic encryption.
"""
from __future__ import annotations

import hashlib
import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import FormatError, ParameterError, ShapeError
from .nets import AvgPool2d, Conv2d, FloatModel, Linear, Square, softmax

__all__ = [
    "Encoding",
    "FixedPointTensor",
    "quantize",
    "QuantConv2d",
    "SquareActivation",
    "QuantAvgPool2d",
    "QuantLinear",
    "PNetModel",
    "ScoreVector",
    "encode_model",
    "forward",
    "forward_batch",
    "save_model",
    "load_model",
    "DEFAULT_BITS",
]

# weight/input bit-widths per dataset
DEFAULT_BITS = {"mnist": 8, "cifar10": 10, "generic": 16}


@dataclass(frozen=True)
class Encoding:
    bits: int
    frac_bits: int

    def __post_init__(self):
        if not 2 <= self.bits <= 62:
            raise ParameterError(f"bit width must be in [2, 62], got {self.bits}")
        if not 0 <= self.frac_bits < self.bits:
            raise ParameterError(f"need 0 <= frac_bits < bits, got f={self.frac_bits}, b={self.bits}")

    @classmethod
    def default(cls, bits: int) -> "Encoding":
        return cls(bits, bits - 2)


@dataclass
class FixedPointTensor:
    ints: np.ndarray
    frac_bits: int
    bit_width: int
    n_saturated: int = 0

    def dequantize(self) -> np.ndarray:
        return self.ints.astype(np.float64) / (1 << self.frac_bits)


def quantize(t, bit_width: int, frac_bits: int) -> FixedPointTensor:
    """Round-half-even to ``frac_bits`` fractional bits, saturating."""
    if frac_bits >= bit_width:
        raise ParameterError(f"frac_bits ({frac_bits}) must be < bit_width ({bit_width})")
    if frac_bits < 0:
        raise ParameterError(f"frac_bits must be >= 0, got {frac_bits}")
    scaled = np.rint(np.asarray(t, dtype=np.float64) * float(1 << frac_bits))
    hi = (1 << (bit_width - 1)) - 1
    lo = -(1 << (bit_width - 1))
    n_sat = int(np.count_nonzero((scaled > hi) | (scaled < lo)))
    ints = np.clip(scaled, lo, hi).astype(np.int64)
    return FixedPointTensor(ints, frac_bits, bit_width, n_sat)


# --- quantized layers -----------------------------------------------------


@dataclass(eq=False)
class QuantConv2d:
    weight: np.ndarray  # int64 (O, kh, kw, C) at 2**enc.frac_bits
    bias: np.ndarray  # int64 (O,) at 2**(f_act + enc.frac_bits)
    stride: int
    padding: int
    enc: Encoding
    kind = "conv"

    def __call__(self, x, acc_bits):
        return kernels.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.enc.frac_bits, acc_bits)

    def output_shape(self, shape):
        h, w, _ = shape
        o, kh, kw, _ = self.weight.shape
        return ((h + 2 * self.padding - kh) // self.stride + 1, (w + 2 * self.padding - kw) // self.stride + 1, o)


@dataclass(eq=False)
class SquareActivation:
    f_act: int
    kind = "square"

    def __call__(self, x, acc_bits):
        return kernels.square(x, self.f_act, acc_bits)

    def output_shape(self, shape):
        return shape


@dataclass(eq=False)
class QuantAvgPool2d:
    kernel: int
    mult: int  # quantized 1 / kernel**2 at 2**enc.frac_bits
    enc: Encoding
    kind = "avgpool"

    def __call__(self, x, acc_bits):
        return kernels.avgpool(x, self.kernel, self.mult, self.enc.frac_bits, acc_bits)

    def output_shape(self, shape):
        h, w, c = shape
        return (h // self.kernel, w // self.kernel, c)


@dataclass(eq=False)
class QuantLinear:
    weight: np.ndarray  # int64 (out, in)
    bias: np.ndarray
    enc: Encoding
    kind = "linear"

    def __call__(self, x, acc_bits):
        return kernels.linear(x.reshape(x.shape[0], -1), self.weight, self.bias, self.enc.frac_bits, acc_bits)

    def output_shape(self, shape):
        return (self.weight.shape[0],)


@dataclass(eq=False)
class PNetModel:
    layers: list
    input_shape: tuple[int, int, int]
    n_classes: int
    input_encoding: Encoding
    acc_bits: int = 32
    float_shadow: FloatModel | None = None

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (self.n_classes,):
            raise ShapeError(f"layer shapes do not compose to ({self.n_classes},): got {shape}")

    @property
    def f_act(self) -> int:
        return self.input_encoding.frac_bits

    def weight_checksum(self) -> str:
        """SHA-256 over every integer tensor, in layer order."""
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(layer.kind.encode())
            for name in ("weight", "bias"):
                arr = getattr(layer, name, None)
                if arr is not None:
                    h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
            if layer.kind == "avgpool":
                h.update(struct.pack("<q", layer.mult))
        return h.hexdigest()

    def equals(self, other: "PNetModel") -> bool:
        """Field-by-field comparison of architecture, encodings and integers."""
        if (self.input_shape, self.n_classes, self.input_encoding, self.acc_bits) != (
            other.input_shape,
            other.n_classes,
            other.input_encoding,
            other.acc_bits,
        ):
            return False
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.kind != b.kind:
                return False
            for name in ("stride", "padding", "kernel", "mult", "enc", "f_act"):
                if getattr(a, name, None) != getattr(b, name, None):
                    return False
            for name in ("weight", "bias"):
                wa, wb = getattr(a, name, None), getattr(b, name, None)
                if (wa is None) != (wb is None) or (wa is not None and not np.array_equal(wa, wb)):
                    return False
        return True


@dataclass
class ScoreVector:
    """Per-class output of one query.

    ``scores`` are softmax probabilities for an undefended query.  Defended
    oracles add noise to them and set ``defended``; then the scores are
    returned raw and need not sum to one.
    """

    scores: np.ndarray
    logits: np.ndarray
    n_saturated: int = 0
    defended: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def label(self) -> int:
        # argmax returns the lowest index on ties
        return int(np.argmax(self.scores))


# --- encoding ---------------------------------------------------------------


def _layer_encodings(float_model, layer_encodings, default):
    n_param = sum(1 for layer in float_model.layers if layer.kind in ("conv", "linear", "avgpool"))
    if layer_encodings is None:
        return [default] * n_param
    encs = [e if isinstance(e, Encoding) else Encoding(*e) for e in layer_encodings]
    if len(encs) != n_param:
        raise ParameterError(f"need {n_param} layer encodings, got {len(encs)}")
    return encs


def encode_model(
    float_model: FloatModel,
    bits: int = 8,
    frac_bits: int | None = None,
    input_encoding: Encoding | tuple | None = None,
    layer_encodings=None,
    acc_bits: int = 32,
) -> PNetModel:
    """Quantize a trained float network into a :class:`PNetModel`.

    Every conv/linear/avg-pool layer gets ``(bits, frac_bits)`` unless
    ``layer_encodings`` lists one encoding per such layer.  Inputs use
    ``input_encoding`` (same as the weights by default).  Biases are stored
    at the product scale with ``acc_bits`` range.
    """
    default = Encoding(bits, bits - 2 if frac_bits is None else frac_bits)
    in_enc = default if input_encoding is None else (
        input_encoding if isinstance(input_encoding, Encoding) else Encoding(*input_encoding)
    )
    encs = iter(_layer_encodings(float_model, layer_encodings, default))
    f_act = in_enc.frac_bits
    layers = []
    for layer in float_model.layers:
        if isinstance(layer, Conv2d):
            enc = next(encs)
            w = quantize(layer.weight, enc.bits, enc.frac_bits).ints
            b = quantize(layer.bias, min(acc_bits + enc.frac_bits, 62), f_act + enc.frac_bits).ints
            layers.append(QuantConv2d(w, b, layer.stride, layer.padding, enc))
        elif isinstance(layer, Linear):
            enc = next(encs)
            w = quantize(layer.weight, enc.bits, enc.frac_bits).ints
            b = quantize(layer.bias, min(acc_bits + enc.frac_bits, 62), f_act + enc.frac_bits).ints
            layers.append(QuantLinear(w, b, enc))
        elif isinstance(layer, Square):
            layers.append(SquareActivation(f_act))
        elif isinstance(layer, AvgPool2d):
            enc = next(encs)
            mult = int(quantize(1.0 / layer.kernel**2, enc.bits, enc.frac_bits).ints)
            layers.append(QuantAvgPool2d(layer.kernel, mult, enc))
        else:
            raise TypeError(f"cannot encode layer {type(layer).__name__}")
    return PNetModel(layers, float_model.input_shape, float_model.n_classes, in_enc, acc_bits, float_model.copy())


# --- inference -------------------------------------------------------------


def forward_batch(m: PNetModel, x, float_mode: bool = False) -> tuple[np.ndarray, int]:
    """Dequantized logits for a batch ``(N, H, W, C)`` and the saturation count."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != m.input_shape:
        raise ShapeError(f"expected input (N, {m.input_shape}), got {x.shape}")
    if float_mode:
        if m.float_shadow is None:
            raise ParameterError("float mode needs the model's float shadow")
        return m.float_shadow.forward(x), 0
    q = quantize(x, m.input_encoding.bits, m.input_encoding.frac_bits)
    h, n_sat = q.ints, q.n_saturated
    for layer in m.layers:
        h, s = layer(h, m.acc_bits)
        n_sat += s
    return h.astype(np.float64) / (1 << m.f_act), n_sat


def forward(m: PNetModel, x, float_mode: bool = False) -> ScoreVector:
    """Query the model on a single image ``(H, W, C)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != m.input_shape:
        raise ShapeError(f"expected input {m.input_shape}, got {x.shape}")
    logits, n_sat = forward_batch(m, x[None], float_mode)
    return ScoreVector(softmax(logits[0]), logits[0], n_sat)


def predict(m: PNetModel, x, float_mode: bool = False, batch_size: int = 500) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        logits, _ = forward_batch(m, x[i : i + batch_size], float_mode)
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def scores_batch(m: PNetModel, x, float_mode: bool = False, batch_size: int = 500) -> np.ndarray:
    out = [softmax(forward_batch(m, x[i : i + batch_size], float_mode)[0]) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, m.n_classes))


# --- model file --------------------------------------------------------------
#
# Little-endian.  Header: b"PNET", u32 version, u32 layer count, then
#   u8 ndim, u32 dims..., u32 n_classes, u8 in_bits, u8 in_frac, u8 acc_bits,
#   u8 has_float_shadow.
# Layer record: u8 kind tag, u8 bits, u8 frac_bits, then per kind
#   conv:    u32 O,kh,kw,C, u32 stride, u32 padding, i64 weight[...], i64 bias[O]
#   square:  (nothing)
#   avgpool: u32 kernel, i64 mult
#   linear:  u32 out,in, i64 weight[...], i64 bias[out]
#   followed, when has_float_shadow and the layer has parameters, by the
#   float64 weight and bias in the same shapes.
# Trailer: u32 CRC-32 of everything before it.

MAGIC = b"PNET"
FORMAT_VERSION = 1
_TAGS = {"conv": 1, "square": 2, "avgpool": 3, "linear": 4}
_KINDS = {v: k for k, v in _TAGS.items()}


def _shadow_layers(m: PNetModel):
    if m.float_shadow is None:
        return [None] * len(m.layers)
    return list(m.float_shadow.layers)


def save_model(m: PNetModel, path) -> None:
    out = io.BytesIO()
    w = out.write
    shadow = _shadow_layers(m)
    w(MAGIC)
    w(struct.pack("<II", FORMAT_VERSION, len(m.layers)))
    w(struct.pack("<B", len(m.input_shape)))
    w(struct.pack(f"<{len(m.input_shape)}I", *m.input_shape))
    w(struct.pack("<IBBBB", m.n_classes, m.input_encoding.bits, m.input_encoding.frac_bits, m.acc_bits, m.float_shadow is not None))
    for layer, fl in zip(m.layers, shadow):
        enc = getattr(layer, "enc", m.input_encoding)
        w(struct.pack("<BBB", _TAGS[layer.kind], enc.bits, enc.frac_bits))
        if layer.kind == "conv":
            w(struct.pack("<4I", *layer.weight.shape))
            w(struct.pack("<II", layer.stride, layer.padding))
        elif layer.kind == "linear":
            w(struct.pack("<2I", *layer.weight.shape))
        elif layer.kind == "avgpool":
            w(struct.pack("<Iq", layer.kernel, layer.mult))
        if layer.kind in ("conv", "linear"):
            w(np.ascontiguousarray(layer.weight, dtype="<i8").tobytes())
            w(np.ascontiguousarray(layer.bias, dtype="<i8").tobytes())
            if fl is not None:
                w(np.ascontiguousarray(fl.weight, dtype="<f8").tobytes())
                w(np.ascontiguousarray(fl.bias, dtype="<f8").tobytes())
    body = out.getvalue()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated model file while reading {what}", self.pos)
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: str, shape, what: str) -> np.ndarray:
        n = int(np.prod(shape))
        raw = self.take(8 * n, what)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype[1:])


def load_model(path) -> PNetModel:
    """Read a model written by :func:`save_model`; raises :class:`FormatError`."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic, not a PNET model file", 0)
    if len(buf) < 8:
        raise FormatError("truncated model file while reading version", 4)
    r = _Reader(buf[:-4] if len(buf) >= 12 else buf)
    r.take(4, "magic")
    version, n_layers = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise FormatError("checksum mismatch (truncated or corrupted file)", len(buf) - 4)
    (ndim,) = r.unpack("<B", "input rank")
    input_shape = r.unpack(f"<{ndim}I", "input shape")
    n_classes, in_bits, in_frac, acc_bits, has_shadow = r.unpack("<IBBBB", "model header")
    in_enc = Encoding(in_bits, in_frac)
    layers, float_layers = [], []
    for i in range(n_layers):
        tag, bits, frac = r.unpack("<BBB", f"layer {i} header")
        kind = _KINDS.get(tag)
        if kind is None:
            raise FormatError(f"unknown layer tag {tag}", r.pos - 3)
        enc = Encoding(bits, frac)
        if kind == "conv":
            shape = r.unpack("<4I", f"layer {i} shape")
            stride, padding = r.unpack("<II", f"layer {i} stride/padding")
            wt = r.array("<i8", shape, f"layer {i} weights")
            bs = r.array("<i8", (shape[0],), f"layer {i} bias")
            layers.append(QuantConv2d(wt, bs, stride, padding, enc))
            if has_shadow:
                fw = r.array("<f8", shape, f"layer {i} float weights")
                fb = r.array("<f8", (shape[0],), f"layer {i} float bias")
                float_layers.append(Conv2d(fw, fb, stride, padding))
        elif kind == "linear":
            shape = r.unpack("<2I", f"layer {i} shape")
            wt = r.array("<i8", shape, f"layer {i} weights")
            bs = r.array("<i8", (shape[0],), f"layer {i} bias")
            layers.append(QuantLinear(wt, bs, enc))
            if has_shadow:
                fw = r.array("<f8", shape, f"layer {i} float weights")
                fb = r.array("<f8", (shape[0],), f"layer {i} float bias")
                float_layers.append(Linear(fw, fb))
        elif kind == "avgpool":
            kernel, mult = r.unpack("<Iq", f"layer {i} pool")
            layers.append(QuantAvgPool2d(kernel, mult, enc))
            float_layers.append(AvgPool2d(kernel))
        else:
            layers.append(SquareActivation(frac))
            float_layers.append(Square())
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last layer", r.pos)
    shadow = FloatModel(float_layers, input_shape, n_classes) if has_shadow else None
    try:
        return PNetModel(layers, input_shape, n_classes, in_enc, acc_bits, shadow)
    except ShapeError as e:
        raise FormatError(f"inconsistent layer shapes: {e}") from e
