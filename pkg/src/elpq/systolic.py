"""Weight-stationary systolic array simulator with a PDP cost model.

Layout: the reduction dimension runs down the array rows and output channels
across the columns. Activation element ``r`` of stream vector ``k`` enters row
``r`` at cycle ``k + r`` and moves one column right per cycle; partial sums move
one row down per cycle and leave the bottom of column ``c`` at cycle
``k + rows - 1 + c``. A full tile therefore takes ``rows + cols + K - 2``
cycles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .engine import IntActivation, bias_to_acc, conv_matrix, digit_planes, im2col
from .quantizer import QuantizedTensor


class TileOverflow(ValueError):
    pass


@dataclass(frozen=True)
class ArrayConfig:
    rows: int = 32
    cols: int = 32
    digits_per_pe: int = 1

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array dimensions must be positive")
        if not 1 <= self.digits_per_pe <= 3:
            raise ValueError(f"digits_per_pe must be 1..3, got {self.digits_per_pe}")

    @classmethod
    def parse(cls, text: str, digits_per_pe: int = 1) -> "ArrayConfig":
        r, c = text.lower().split("x")
        return cls(int(r), int(c), digits_per_pe)


@dataclass(frozen=True)
class CostEntry:
    name: str
    power_mw: float
    delay_ns: float
    area_um2: float
    energy_per_mac_pj: float
    act_bits: int | None = None

    def __post_init__(self):
        for k in ("power_mw", "delay_ns", "area_um2", "energy_per_mac_pj"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{self.name}: {k} must be positive")

    @property
    def pdp_pj(self) -> float:
        return self.power_mw * self.delay_ns


@dataclass(frozen=True)
class CostTable:
    designs: tuple[CostEntry, ...]

    def lookup(self, name: str, act_bits: int | None = None) -> CostEntry:
        """Exact (name, act_bits) entry if present, else the generic entry for name."""
        generic = None
        for e in self.designs:
            if e.name != name:
                continue
            if act_bits is not None and e.act_bits == act_bits:
                return e
            if e.act_bits is None:
                generic = e
        if generic is None:
            raise KeyError(f"unknown design {name!r}")
        return generic

    def scaled(self, c: float) -> "CostTable":
        return CostTable(tuple(
            replace(e, power_mw=e.power_mw * c, energy_per_mac_pj=e.energy_per_mac_pj * c)
            for e in self.designs
        ))

    @classmethod
    def from_dict(cls, doc: dict) -> "CostTable":
        return cls(tuple(
            CostEntry(d["name"], float(d["power_mw"]), float(d["delay_ns"]), float(d["area_um2"]),
                      float(d["energy_per_mac_pj"]), d.get("act_bits"))
            for d in doc["designs"]
        ))

    @classmethod
    def load(cls, path) -> "CostTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SimResult:
    outputs: np.ndarray
    cycles: int
    mac_count: int
    tiles: int = 1
    pdp_estimate: float | None = None
    energy_pj: float | None = None

    def summary(self) -> dict:
        return {
            "cycles": self.cycles,
            "mac_count": self.mac_count,
            "tiles": self.tiles,
            "pdp_pj": self.pdp_estimate,
            "energy_pj": self.energy_pj,
        }


def tile_cycles(rows: int, cols: int, k: int) -> int:
    return rows + cols + k - 2


def _pe_planes(tile: QuantizedTensor):
    """Per-digit (sign, shift) planes, or None for plain integer weights."""
    if tile.format is None:
        return None
    return digit_planes(tile.codes, tile.format)


def simulate_matmul(tile: QuantizedTensor, stream: np.ndarray, cfg: ArrayConfig) -> SimResult:
    """Run ``stream[K, R] @ tile[R, C]`` through the array cycle by cycle.

    ``tile`` holds the stationary weights with the reduction index on rows.
    Returns outputs [K, C] as exact integers.
    """
    stream = np.asarray(stream, dtype=np.int64)
    r_used, c_used = tile.dims
    if r_used > cfg.rows or c_used > cfg.cols:
        raise TileOverflow(f"tile {tile.dims} does not fit a {cfg.rows}x{cfg.cols} array")
    if stream.ndim != 2 or stream.shape[1] != r_used or stream.shape[0] < 1:
        raise ValueError(f"stream must be [K>=1, {r_used}], got {stream.shape}")
    planes = _pe_planes(tile)
    if planes is not None and len(planes) != cfg.digits_per_pe:
        raise ValueError(
            f"weights have {len(planes)} digits but PEs hold {cfg.digits_per_pe} shift units"
        )
    k_len = stream.shape[0]
    cycles = tile_cycles(r_used, c_used, k_len)
    act = np.zeros((r_used, c_used), dtype=np.int64)
    psum = np.zeros((r_used, c_used), dtype=np.int64)
    out = np.zeros((k_len, c_used), dtype=np.int64)
    rows_idx = np.arange(r_used)
    cols_idx = np.arange(c_used)
    for t in range(cycles):
        # activations step right; row r is fed element t - r of the stream
        act[:, 1:] = act[:, :-1]
        k_in = t - rows_idx
        live = (k_in >= 0) & (k_in < k_len)
        act[:, 0] = np.where(live, stream[np.clip(k_in, 0, k_len - 1), rows_idx], 0)
        if planes is None:
            prod = act * tile.int_levels
        else:
            prod = np.zeros_like(act)
            for sign, shift in planes:
                prod += sign * np.left_shift(act, shift)
        below = np.empty_like(psum)
        below[0] = prod[0]
        below[1:] = psum[:-1] + prod[1:]
        psum = below
        k_out = t - (r_used - 1) - cols_idx
        done = (k_out >= 0) & (k_out < k_len)
        out[k_out[done], cols_idx[done]] = psum[-1, done]
    return SimResult(out, cycles, r_used * c_used * k_len)


def simulate_tiled(weights: QuantizedTensor, stream: np.ndarray, cfg: ArrayConfig) -> SimResult:
    """``stream[K, R] @ weights[O, R].T`` split into array-sized tiles.

    Reduction tiles are summed outside the array in a fixed order.
    """
    n_out, n_red = weights.dims
    out = np.zeros((stream.shape[0], n_out), dtype=np.int64)
    cycles = macs = tiles = 0
    for c0 in range(0, n_out, cfg.cols):
        c1 = min(c0 + cfg.cols, n_out)
        for r0 in range(0, n_red, cfg.rows):
            r1 = min(r0 + cfg.rows, n_red)
            tile = QuantizedTensor(
                weights.int_levels[c0:c1, r0:r1].T, weights.codes[c0:c1, r0:r1].T,
                weights.scale, weights.format,
            )
            res = simulate_matmul(tile, stream[:, r0:r1], cfg)
            out[:, c0:c1] += res.outputs
            cycles += res.cycles
            macs += res.mac_count
            tiles += 1
    return SimResult(out, cycles, macs, tiles)


def tile_grid(n_red: int, n_out: int, cfg: ArrayConfig) -> tuple[int, int]:
    """(reduction tiles, output tiles) needed to cover a layer."""
    return math.ceil(n_red / cfg.rows), math.ceil(n_out / cfg.cols)


def simulate_layer(layer, qt: QuantizedTensor, x: IntActivation, cfg: ArrayConfig) -> SimResult:
    """Simulate a conv or fc layer; outputs match the engine's raw accumulators."""
    bias_acc = bias_to_acc(layer.bias, x.frac_bits, qt.scale)
    if layer.kind == "conv":
        _, _, kh, kw = qt.dims
        cols = im2col(x.values, kh, kw, layer.spec.stride, layer.spec.pad)
        n, oh, ow, k = cols.shape
        res = simulate_tiled(conv_matrix(qt), cols.reshape(-1, k), cfg)
        acc = res.outputs if bias_acc is None else res.outputs + bias_acc
        res.outputs = acc.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)
    elif layer.kind == "fc":
        flat = x.values.reshape(x.values.shape[0], -1)
        res = simulate_tiled(qt, flat, cfg)
        if bias_acc is not None:
            res.outputs = res.outputs + bias_acc
    else:
        raise ValueError(f"{layer.name}: only conv/fc layers run on the array")
    return res


def simulate_conv_layer(layer, qt: QuantizedTensor, x: IntActivation, cfg: ArrayConfig) -> SimResult:
    if layer.kind != "conv":
        raise ValueError(f"{layer.name} is not a conv layer")
    return simulate_layer(layer, qt, x, cfg)


@dataclass(frozen=True)
class PdpEstimate:
    design: str
    pdp_pj: float
    energy_pj: float


def estimate_pdp(sim: SimResult, cost: CostTable, design_name: str,
                 act_bits: int | None = None) -> PdpEstimate:
    """PE power-delay product plus ``energy_per_mac * mac_count`` for the run."""
    entry = cost.lookup(design_name, act_bits)
    est = PdpEstimate(design_name, entry.pdp_pj, entry.energy_per_mac_pj * sim.mac_count)
    sim.pdp_estimate = est.pdp_pj
    sim.energy_pj = est.energy_pj
    return est


def pdp_ratio(cost: CostTable, design_a: str, design_b: str) -> float:
    return cost.lookup(design_a).pdp_pj / cost.lookup(design_b).pdp_pj
