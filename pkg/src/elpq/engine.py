"""Bit-exact fixed-point forward pass with shift-and-add weight products.

Activations are signed 2's-complement integers with a per-tensor binary point.
A conv/fc layer accumulates ``a << shift`` terms (one per weight digit) into a
wide accumulator whose real scale is ``SF * 2**-frac_in``; the result is then
requantized onto the next layer's activation grid.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np

from .elpbsd import FormatSpec, bit_width, digit_terms, valid_codes
from .quantizer import QuantizedTensor, UniformFPSpec, choose_activation_frac_bits, round_half_away
from .tensorio import Dataset, Model, ShapeError


class AccumulatorOverflow(ArithmeticError):
    pass


@dataclass(frozen=True)
class FixedPointConfig:
    """``frac_bits[0]`` is the network input; ``frac_bits[k+1]`` the output of
    the k-th conv/fc layer."""

    act_bits: int
    frac_bits: tuple[int, ...]
    acc_bits: int = 32

    def __post_init__(self):
        if not 2 <= self.act_bits <= 16:
            raise ValueError(f"act_bits must be 2..16, got {self.act_bits}")
        if not 2 <= self.acc_bits <= 63:
            raise ValueError(f"acc_bits must be 2..63, got {self.acc_bits}")
        object.__setattr__(self, "frac_bits", tuple(int(f) for f in self.frac_bits))

    def act_spec(self, k: int) -> UniformFPSpec:
        return UniformFPSpec(self.act_bits, self.frac_bits[k])


@dataclass(frozen=True)
class IntActivation:
    values: np.ndarray
    frac_bits: int

    @property
    def real(self) -> np.ndarray:
        return np.ldexp(self.values.astype(np.float64), -self.frac_bits)


@dataclass(frozen=True)
class QuantizedModel:
    """A float model whose conv/fc weights have been replaced by quantized ones."""

    model: Model
    weights: dict = field(default_factory=dict)  # layer index -> QuantizedTensor

    @property
    def layers(self):
        return self.model.layers


def required_acc_bits(act_bits: int, max_shift: int, dot_len: int, digits: int = 1) -> int:
    """Accumulator width that cannot overflow for any input of the given size."""
    extra = math.ceil(math.log2(dot_len * digits)) if dot_len * digits > 1 else 0
    return act_bits + max_shift + extra + 1


# ------------------------------------------------------------------- scalar MAC


def shift_mac(acc: int, a: int, code: int, spec: FormatSpec, acc_bits: int = 32) -> int:
    """Add ``a * w`` to ``acc`` using one shift per digit of the encoded weight."""
    lim = 1 << (acc_bits - 1)
    for sign, shift in digit_terms(code, spec):
        term = a << shift
        acc = acc + term if sign > 0 else acc - term
        if not -lim <= acc < lim:
            raise AccumulatorOverflow(f"accumulator left {acc_bits}-bit range: {acc}")
    return acc


# ------------------------------------------------------------ vectorised kernels


@lru_cache(maxsize=64)
def _digit_luts(spec: FormatSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-digit (sign, shift) for every code: arrays of shape [m, 2**bits]."""
    m, size = len(spec.digits), 1 << bit_width(spec)
    signs = np.zeros((m, size), dtype=np.int64)
    shifts = np.zeros((m, size), dtype=np.int64)
    for code in valid_codes(spec):
        for d, (s, k) in enumerate(digit_terms(code, spec)):
            signs[d, code] = s
            shifts[d, code] = k
    return signs, shifts


def digit_planes(codes: np.ndarray, spec: FormatSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a code matrix into per-digit (sign, shift) matrices."""
    signs, shifts = _digit_luts(spec)
    return [(signs[d][codes], shifts[d][codes]) for d in range(len(spec.digits))]


def shift_matmul(x: np.ndarray, qt_matrix: QuantizedTensor) -> np.ndarray:
    """``x[M,K] @ w[O,K].T`` where each weight product is built from shifts.

    For each digit d the partial product ``sign_d * (x << shift_d)`` is reduced
    over K; powers of two are applied as integer left shifts of the weight
    plane (``1 << shift``) which is exactly ``x << shift`` per term.
    """
    x = x.astype(np.int64, copy=False)
    if qt_matrix.format is None:
        return x @ qt_matrix.int_levels.T
    acc = np.zeros((x.shape[0], qt_matrix.codes.shape[0]), dtype=np.int64)
    for sign, shift in digit_planes(qt_matrix.codes, qt_matrix.format):
        acc += x @ (sign * np.left_shift(np.int64(1), shift)).T
    return acc


def _abs_weight_bound(qt_matrix: QuantizedTensor) -> np.ndarray:
    if qt_matrix.format is None:
        return np.abs(qt_matrix.int_levels).astype(np.float64)
    total = np.zeros(qt_matrix.codes.shape, dtype=np.float64)
    for _, shift in digit_planes(qt_matrix.codes, qt_matrix.format):
        total += np.ldexp(1.0, shift)
    return total


def _check_overflow(x: np.ndarray, qt_matrix: QuantizedTensor, bias_acc, acc_bits: int, name: str):
    # Sum of |terms| bounds every partial sum regardless of accumulation order.
    bound = np.abs(x).astype(np.float64) @ _abs_weight_bound(qt_matrix).T
    if bias_acc is not None:
        bound = bound + np.abs(bias_acc).astype(np.float64)
    worst = float(bound.max()) if bound.size else 0.0
    if worst >= 2.0 ** (acc_bits - 1):
        raise AccumulatorOverflow(
            f"{name}: partial sums may reach {worst:.0f}, beyond a {acc_bits}-bit accumulator"
        )


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """[N,C,H,W] -> [N,OH,OW,kh*kw*C] with patch elements ordered (kh, kw, c)."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N,C,OH,OW,kh,kw]
    oh, ow = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 4, 5, 1).reshape(n, oh, ow, kh * kw * c)


def conv_matrix(qt: QuantizedTensor) -> QuantizedTensor:
    """Reshape [O,C,kh,kw] weights to [O, kh*kw*C] matching im2col order."""
    def flat(a):
        return a.transpose(0, 2, 3, 1).reshape(a.shape[0], -1)

    return QuantizedTensor(flat(qt.int_levels), flat(qt.codes), qt.scale, qt.format)


def bias_to_acc(bias, frac_in: int, scale: float) -> np.ndarray | None:
    if bias is None:
        return None
    return round_half_away(np.ldexp(np.asarray(bias, dtype=np.float64), frac_in) / scale).astype(np.int64)


def conv_forward(x: IntActivation, layer, qt: QuantizedTensor, acc_bits: int = 32) -> np.ndarray:
    """Raw accumulators [N,O,OH,OW] in scale ``qt.scale * 2**-x.frac_bits``."""
    vals = x.values
    if vals.ndim != 4 or vals.shape[1] != qt.dims[1]:
        raise ShapeError(f"{layer.name}: input {vals.shape} does not match weights {qt.dims}")
    _, _, kh, kw = qt.dims
    cols = im2col(vals, kh, kw, layer.spec.stride, layer.spec.pad)
    n, oh, ow, k = cols.shape
    mat = conv_matrix(qt)
    flat = cols.reshape(-1, k)
    bias_acc = bias_to_acc(layer.bias, x.frac_bits, qt.scale)
    _check_overflow(flat, mat, bias_acc, acc_bits, layer.name)
    acc = shift_matmul(flat, mat)
    if bias_acc is not None:
        acc += bias_acc
    return acc.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)


def fc_forward(x: IntActivation, layer, qt: QuantizedTensor, acc_bits: int = 32) -> np.ndarray:
    """Raw accumulators [N,O]; the input is flattened per sample."""
    flat = x.values.reshape(x.values.shape[0], -1)
    if flat.shape[1] != qt.dims[1]:
        raise ShapeError(f"{layer.name}: {flat.shape[1]} inputs, weights expect {qt.dims[1]}")
    bias_acc = bias_to_acc(layer.bias, x.frac_bits, qt.scale)
    _check_overflow(flat, qt, bias_acc, acc_bits, layer.name)
    acc = shift_matmul(flat, qt)
    if bias_acc is not None:
        acc += bias_acc
    return acc


def requantize(acc: np.ndarray, acc_scale: float, frac_bits: int, act_bits: int) -> IntActivation:
    """Map accumulators (real value = acc * acc_scale) onto the activation grid."""
    spec = UniformFPSpec(act_bits, frac_bits)
    lo, hi = spec.int_range
    real = acc.astype(np.float64) * acc_scale
    q = np.clip(round_half_away(np.ldexp(real, frac_bits)), lo, hi).astype(np.int64)
    return IntActivation(q, frac_bits)


def relu(t):
    return np.maximum(t, 0)


def maxpool(t: np.ndarray, size: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(t, (size, size), axis=(-2, -1))
    return win[..., ::stride, ::stride, :, :].max(axis=(-2, -1))


# ----------------------------------------------------------------------- inference


def _as_batch(images, input_dims) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.shape == tuple(input_dims):
        x = x[None]
    if x.shape[1:] != tuple(input_dims):
        raise ShapeError(f"input {x.shape[1:]} does not match model input {tuple(input_dims)}")
    return x


def infer(qmodel: QuantizedModel, images, cfg: FixedPointConfig, trace: dict | None = None) -> np.ndarray:
    """Fixed-point forward pass; returns real-valued logits [N, classes].

    If ``trace`` is a dict, each conv/fc layer's integer input and raw
    accumulator are stored in it as ``trace[i] = (IntActivation, acc)``.
    """
    model = qmodel.model
    x = _as_batch(images, model.input_dims)
    weighted = model.weighted_indices()
    if len(cfg.frac_bits) < len(weighted) + 1:
        raise ValueError(f"need {len(weighted) + 1} frac_bits entries, got {len(cfg.frac_bits)}")
    act = IntActivation(
        np.clip(round_half_away(np.ldexp(x, cfg.frac_bits[0])), *cfg.act_spec(0).int_range).astype(np.int64),
        cfg.frac_bits[0],
    )
    real = None  # set once the last weighted layer has produced logits
    for i, layer in enumerate(model.layers):
        kind = layer.kind
        if kind in ("conv", "fc"):
            k = weighted.index(i)
            qt = qmodel.weights[i]
            fwd = conv_forward if kind == "conv" else fc_forward
            acc = fwd(act, layer, qt, cfg.acc_bits)
            if trace is not None:
                trace[i] = (act, acc)
            acc_scale = qt.scale * math.ldexp(1.0, -act.frac_bits)
            if k == len(weighted) - 1:
                real = acc.astype(np.float64) * acc_scale
            else:
                act = requantize(acc, acc_scale, cfg.frac_bits[k + 1], cfg.act_bits)
        elif kind == "relu":
            if real is None:
                act = IntActivation(relu(act.values), act.frac_bits)
            else:
                real = relu(real)
        elif kind == "maxpool":
            size, stride = layer.spec.pool_size, layer.spec.stride
            if real is None:
                act = IntActivation(maxpool(act.values, size, stride), act.frac_bits)
            else:
                real = maxpool(real, size, stride)
    if real is None:
        real = act.real
    return real.reshape(real.shape[0], -1)


def layer_forward_float(layer, x: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """One layer in float64; ``weights`` overrides the layer's own."""
    kind = layer.kind
    if kind == "conv":
        w = layer.weights if weights is None else weights
        cols = im2col(x, w.shape[2], w.shape[3], layer.spec.stride, layer.spec.pad)
        y = (cols @ w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1).T).transpose(0, 3, 1, 2)
        return y if layer.bias is None else y + layer.bias[None, :, None, None]
    if kind == "fc":
        w = layer.weights if weights is None else weights
        y = x.reshape(x.shape[0], -1) @ w.T
        return y if layer.bias is None else y + layer.bias[None, :]
    if kind == "relu":
        return relu(x)
    return maxpool(x, layer.spec.pool_size, layer.spec.stride)


def float_forward(model: Model, images, weights: dict | None = None, act_bits: int | None = None,
                  frac_bits=None, collect: bool = False):
    """Float reference forward pass.

    ``weights`` optionally overrides layer weights (index -> float array).  With
    ``act_bits`` set, the input and every non-final conv/fc output are rounded
    onto the same grids the fixed-point engine uses. With ``collect`` the
    pre-activation output of every conv/fc layer is returned as well.
    """
    x = _as_batch(images, model.input_dims)
    weighted = model.weighted_indices()
    quant = act_bits is not None

    def fq(t, k):
        if not quant:
            return t
        spec = UniformFPSpec(act_bits, frac_bits[k])
        lo, hi = spec.int_range
        return np.ldexp(np.clip(round_half_away(np.ldexp(t, spec.frac_bits)), lo, hi), -spec.frac_bits)

    x = fq(x, 0)
    outputs = []
    for i, layer in enumerate(model.layers):
        w = None if weights is None else weights.get(i)
        y = layer_forward_float(layer, x, w)
        if layer.spec.weighted:
            k = weighted.index(i)
            if collect:
                outputs.append(y)
            y = fq(y, k + 1) if k < len(weighted) - 1 else y
        x = y
    logits = x.reshape(x.shape[0], -1)
    return (logits, outputs) if collect else logits


def calibrate(model: Model, images, act_bits: int, acc_bits: int = 32) -> FixedPointConfig:
    """Pick per-tensor binary points from float activations of ``images``."""
    x = _as_batch(images, model.input_dims)
    _, outs = float_forward(model, x, collect=True)
    fracs = [choose_activation_frac_bits(x, act_bits)]
    fracs += [choose_activation_frac_bits(o, act_bits) for o in outs]
    return FixedPointConfig(act_bits, tuple(fracs), acc_bits)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate_accuracy(qmodel: QuantizedModel, dataset: Dataset, cfg: FixedPointConfig,
                      batch: int = 256) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    hits = 0
    for s in range(0, len(dataset), batch):
        logits = infer(qmodel, dataset.images[s : s + batch], cfg)
        hits += int(np.sum(np.argmax(logits, axis=1) == dataset.labels[s : s + batch]))
    return hits / len(dataset)


def float_accuracy(model: Model, dataset: Dataset, **kw) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return accuracy_from_logits(float_forward(model, dataset.images, **kw), dataset.labels)
