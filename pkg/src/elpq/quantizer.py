"""Scale selection, nearest-level quantization, mean-error compensation and
uniform fixed-point quantization."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .elpbsd import FormatSpec, QuantTable, enumerate_levels

FC_GROUP = 9


class DegenerateScale(ValueError):
    pass


class NoOppositeLevel(ValueError):
    pass


def scale_factor(weights, spec: FormatSpec) -> float:
    """max|w| / 2**(largest shift count in the format)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise DegenerateScale("empty weight tensor")
    peak = float(np.max(np.abs(w)))
    if peak == 0.0:
        raise DegenerateScale("all weights are zero")
    return peak / float(1 << spec.max_shift)


def layer_table(weights, spec: FormatSpec) -> QuantTable:
    return enumerate_levels(spec.with_scale(scale_factor(weights, spec)))


def nearest_quantize(weights, table: QuantTable) -> tuple[np.ndarray, np.ndarray]:
    """Return (quantized values, error) with error = weights - quantized."""
    w = np.asarray(weights, dtype=np.float64)
    q = table.levels[table.nearest_index(w)]
    return q, w - q


def _opposite_indices(w: np.ndarray, nearest: np.ndarray, table: QuantTable) -> np.ndarray:
    """Index of the adjacent level on the far side of ``w``; -1 when none exists."""
    q = table.levels[nearest]
    opp = np.where(w > q, nearest + 1, nearest - 1)
    opp = np.where(w == q, -1, opp)
    return np.where((opp < 0) | (opp >= len(table)), -1, opp)


def opposite_neighbor(v: float, table: QuantTable) -> float:
    idx = int(table.nearest_index(v))
    q = table.levels[idx]
    if v == q:
        raise NoOppositeLevel(f"{v} lies exactly on a level")
    opp = int(_opposite_indices(np.array([v]), np.array([idx]), table)[0])
    if opp < 0:
        raise NoOppositeLevel(f"{v} lies outside the table range beyond {q}")
    return float(table.levels[opp])


@dataclass
class CompensationReport:
    """Per-group statistics; rows are (filter, channel, mean_before, mean_after, flips)."""

    rows: list[tuple[int, int, float, float, int]] = field(default_factory=list)

    @property
    def total_flips(self) -> int:
        return sum(r[4] for r in self.rows)

    def to_csv(self, layer: str = "") -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "filter", "channel", "mean_before", "mean_after", "flips"])
        for f, c, before, after, flips in self.rows:
            writer.writerow([layer, f, c, repr(before), repr(after), flips])
        return buf.getvalue()


def compensate_group(w: np.ndarray, table: QuantTable) -> tuple[np.ndarray, float, float, int]:
    """Greedy mean-error compensation of one group of weights.

    Returns (level indices, mean error before, mean error after, flips accepted).
    Candidates are weights whose error has the same sign as the group mean; they
    are tried in order of increasing |w - opposite level| (ties by position) and
    moved to their opposite level while that strictly shrinks |mean error|.
    """
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    idx = table.nearest_index(w)
    err = w - table.levels[idx]
    before = float(np.mean(err))
    if before == 0.0:
        return idx, before, before, 0
    opp = _opposite_indices(w, idx, table)
    cand = np.flatnonzero((np.sign(err) == np.sign(before)) & (opp >= 0))
    if cand.size == 0:
        return idx, before, before, 0
    cost = np.abs(w[cand] - table.levels[opp[cand]])
    order = cand[np.lexsort((cand, cost))]
    mean = before
    flips = 0
    idx = idx.copy()
    for k in order:
        # recompute the mean from scratch so it equals mean(w - q) bit for bit
        trial = err.copy()
        trial[k] = w[k] - table.levels[opp[k]]
        new_mean = float(np.mean(trial))
        if abs(mean) > abs(new_mean):
            idx[k] = opp[k]
            err = trial
            mean = new_mean
            flips += 1
        else:
            break
    return idx, before, mean, flips


def _groups(shape: tuple[int, ...], mode: str):
    """Yield (filter, channel, flat-index array) for each compensation group."""
    if len(shape) == 4:
        oc, ic, kh, kw = shape
        plane = kh * kw
        for f in range(oc):
            if mode == "filter":
                base = f * ic * plane
                yield f, -1, np.arange(base, base + ic * plane)
            else:
                for c in range(ic):
                    base = (f * ic + c) * plane
                    yield f, c, np.arange(base, base + plane)
    elif len(shape) == 2:
        oc, n_in = shape
        for f in range(oc):
            if mode == "filter":
                yield f, -1, np.arange(f * n_in, (f + 1) * n_in)
            else:
                for g, start in enumerate(range(0, n_in, FC_GROUP)):
                    stop = min(start + FC_GROUP, n_in)
                    yield f, g, np.arange(f * n_in + start, f * n_in + stop)
    else:
        raise ValueError(f"compensation needs 2D or 4D weights, got shape {shape}")


def compensate(weights, table: QuantTable, mode: str = "channel"):
    """Quantize ``weights`` to ``table`` and compensate each group's mean error.

    ``mode`` is "channel" (one group per filter x input channel; FC rows are
    split into blocks of 9 inputs) or "filter" (one group per filter).
    Returns (level indices shaped like weights, CompensationReport).
    """
    if mode not in ("channel", "filter"):
        raise ValueError(f"unknown compensation mode {mode!r}")
    w = np.asarray(weights, dtype=np.float64)
    flat = w.reshape(-1)
    out = np.empty(flat.size, dtype=np.int64)
    report = CompensationReport()
    for f, c, sel in _groups(w.shape, mode):
        idx, before, after, flips = compensate_group(flat[sel], table)
        out[sel] = idx
        report.rows.append((f, c, before, after, flips))
    return out.reshape(w.shape), report


# ------------------------------------------------------------------- uniform grid


@dataclass(frozen=True)
class UniformFPSpec:
    total_bits: int
    frac_bits: int
    signed: bool = True

    def __post_init__(self):
        if not 2 <= self.total_bits <= 16:
            raise ValueError(f"total_bits must be 2..16, got {self.total_bits}")

    @property
    def int_range(self) -> tuple[int, int]:
        if self.signed:
            return -(1 << (self.total_bits - 1)), (1 << (self.total_bits - 1)) - 1
        return 0, (1 << self.total_bits) - 1

    @property
    def step(self) -> float:
        return math.ldexp(1.0, -self.frac_bits)


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    whole = np.trunc(x)
    # x - trunc(x) is exact, unlike floor(|x| + 0.5)
    return whole + np.sign(x) * (np.abs(x - whole) >= 0.5)


def uniform_quantize_int(t, spec: UniformFPSpec) -> np.ndarray:
    """Integer codes on the 2**-frac_bits grid (round half away, saturate)."""
    lo, hi = spec.int_range
    scaled = np.ldexp(np.asarray(t, dtype=np.float64), spec.frac_bits)
    return np.clip(round_half_away(scaled), lo, hi).astype(np.int64)


def uniform_quantize(t, spec: UniformFPSpec) -> np.ndarray:
    return np.ldexp(uniform_quantize_int(t, spec).astype(np.float64), -spec.frac_bits)


def choose_activation_frac_bits(calib_acts, total_bits: int) -> int:
    """Largest frac_bits for which max|a| stays inside the signed range.

    The range check uses 2**(total_bits-1-frac) as the bound, so the value is
    allowed to touch the top code after rounding. Never negative.
    """
    a = np.asarray(calib_acts, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty calibration set")
    peak = float(np.max(np.abs(a)))
    frac = total_bits - 1
    while frac > 0 and math.ldexp(1.0, total_bits - 1 - frac) < peak:
        frac -= 1
    return frac


# ------------------------------------------------------------------ whole models


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Weights as per-element integer levels times one scale.

    ``codes`` holds packed ELP_BSD codes when ``format`` is set; uniform
    (plain 2's-complement) weights have ``format=None`` and codes equal to the
    two's-complement bit pattern of ``int_levels``.
    """

    int_levels: np.ndarray
    codes: np.ndarray
    scale: float
    format: FormatSpec | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.int_levels.shape

    @property
    def values(self) -> np.ndarray:
        return self.int_levels * self.scale

    @classmethod
    def from_indices(cls, idx: np.ndarray, table: QuantTable) -> "QuantizedTensor":
        return cls(table.int_levels[idx], table.codes[idx], table.scale, table.format)

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.scale == other.scale
            and self.format == other.format
            and np.array_equal(self.int_levels, other.int_levels)
            and np.array_equal(self.codes, other.codes)
        )

    __hash__ = None


def uniform_weight_table(weights, total_bits: int) -> QuantTable:
    """Symmetric 2's-complement grid scaled so max|w| maps to 2**(bits-1)-1."""
    from .elpbsd import uniform_table

    w = np.asarray(weights, dtype=np.float64)
    peak = float(np.max(np.abs(w)))
    if peak == 0.0:
        raise DegenerateScale("all weights are zero")
    return uniform_table(total_bits, peak / ((1 << (total_bits - 1)) - 1))


def quantize_weights(weights, table: QuantTable, compensated: bool = True,
                     mode: str = "channel") -> tuple[QuantizedTensor, CompensationReport]:
    if compensated:
        idx, report = compensate(weights, table, mode)
    else:
        idx = table.nearest_index(weights)
        report = CompensationReport()
    return QuantizedTensor.from_indices(idx, table), report


def quantize_model(model, weight_format, compensated: bool = True, mode: str = "channel",
                   compensate_fc: bool = False):
    """Quantize every conv/fc layer of ``model``.

    ``weight_format`` is a FormatSpec template (its scale is replaced per layer)
    or an int, meaning uniform weights of that many bits. Compensation is
    applied to conv layers; fc layers only with ``compensate_fc`` (9-input groups).

    Returns (dict layer index -> QuantizedTensor, dict layer name -> report).
    """
    qweights = {}
    reports = {}
    for i in model.weighted_indices():
        layer = model.layers[i]
        if isinstance(weight_format, FormatSpec):
            table = layer_table(layer.weights, weight_format)
        else:
            table = uniform_weight_table(layer.weights, int(weight_format))
        comp = compensated and (layer.kind == "conv" or compensate_fc)
        qt, report = quantize_weights(layer.weights, table, comp, mode)
        qweights[i] = qt
        reports[layer.name] = report
    return qweights, reports
