"""Distribution statistics, feature-map correlation, bias-noise injection and
the quantization-error variance model.

All randomness goes through ``numpy.random.Generator(PCG64(seed))``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .tensorio import Layer, Model


class UndefinedCorrelation(ValueError):
    pass


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def distribution_stats(t) -> dict:
    v = np.asarray(t, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("empty tensor")
    mean = float(v.mean())
    std = float(v.std())
    q1, med, q3 = (float(q) for q in np.quantile(v, [0.25, 0.5, 0.75]))
    dev = np.abs(v - mean)
    return {
        "count": int(v.size),
        "mean": mean,
        "std": std,
        "min": float(v.min()),
        "q1": q1,
        "median": med,
        "q3": q3,
        "max": float(v.max()),
        "tail2": float(np.mean(dev > 2 * std)) if std > 0 else 0.0,
        "tail3": float(np.mean(dev > 3 * std)) if std > 0 else 0.0,
    }


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt(np.dot(da, da) * np.dot(db, db))
    if denom == 0:
        raise UndefinedCorrelation("constant input")
    return float(np.clip(np.dot(da, db) / denom, -1.0, 1.0))


def shifted_overlap(fmap: np.ndarray, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
    """The map and its (i, j)-shifted copy restricted to their overlap.

    ``i`` shifts along x (columns), ``j`` along y (rows). No padding.
    """
    h, w = fmap.shape
    if abs(i) >= w or abs(j) >= h:
        raise UndefinedCorrelation(f"shift ({i}, {j}) leaves no overlap on a {h}x{w} map")
    ys, yd = (slice(0, h - j), slice(j, h)) if j >= 0 else (slice(-j, h), slice(0, h + j))
    xs, xd = (slice(0, w - i), slice(i, w)) if i >= 0 else (slice(-i, w), slice(0, w + i))
    return fmap[ys, xs], fmap[yd, xd]


def intra_corr(fmap, i: int, j: int) -> float:
    a, b = shifted_overlap(np.asarray(fmap, dtype=np.float64), i, j)
    return pearson(a, b)


def intra_corr_map(fmaps, max_shift: int) -> list[tuple[int, int, float, float, int]]:
    """Mean and std of the shift correlation over a stack of 2D maps.

    Maps whose overlap is constant are skipped; the count used is reported.
    Rows are (i, j, mean r, std r, n).
    """
    rows = []
    for j in range(-max_shift, max_shift + 1):
        for i in range(-max_shift, max_shift + 1):
            rs = []
            for fmap in fmaps:
                try:
                    rs.append(intra_corr(fmap, i, j))
                except UndefinedCorrelation:
                    pass
            if rs:
                rows.append((i, j, float(np.mean(rs)), float(np.std(rs)), len(rs)))
            else:
                rows.append((i, j, float("nan"), float("nan"), 0))
    return rows


def inter_corr(fmaps) -> tuple[np.ndarray, list[int]]:
    """Channel-by-channel Pearson matrix of a [C, H, W] tensor.

    Entries involving a constant channel are NaN; those channels are returned
    in the second element.
    """
    f = np.asarray(fmaps, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] < 2:
        raise ValueError("need a [C>=2, H, W] tensor")
    flat = f.reshape(f.shape[0], -1)
    centred = flat - flat.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centred * centred, axis=1))
    constant = [int(c) for c in np.flatnonzero(norms == 0)]
    safe = np.where(norms == 0, 1.0, norms)
    unit = centred / safe[:, None]
    corr = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    if constant:
        corr[constant, :] = np.nan
        corr[:, constant] = np.nan
    return corr, constant


def off_diagonal(corr: np.ndarray) -> np.ndarray:
    mask = ~np.eye(corr.shape[0], dtype=bool)
    vals = corr[mask]
    return vals[~np.isnan(vals)]


# ------------------------------------------------------------------- bias noise


NOISE_MODES = ("constant", "split_sign", "gaussian")


def inject_bias_noise(model: Model, layer_idx: int, num_filters: int, mode: str,
                      magnitude: float, seed: int = 0) -> Model:
    """Return a copy of ``model`` with noise added to some biases of one layer.

    ``num_filters`` filters are drawn without replacement using ``seed``.
    constant: +magnitude each; split_sign: +magnitude on the first half of the
    drawn filters, -magnitude on the rest; gaussian: N(0, magnitude**2) draws.
    """
    if mode not in NOISE_MODES:
        raise ValueError(f"unknown noise mode {mode!r}")
    layer = model.layers[layer_idx]
    if layer.bias is None:
        raise ValueError(f"layer {layer.name!r} has no bias")
    n = layer.bias.shape[0]
    if not 0 <= num_filters <= n:
        raise ValueError(f"num_filters must be 0..{n}")
    g = rng(seed)
    chosen = np.sort(g.choice(n, size=num_filters, replace=False))
    delta = np.zeros(n)
    if mode == "constant":
        delta[chosen] = magnitude
    elif mode == "split_sign":
        half = num_filters // 2
        delta[chosen[:half]] = magnitude
        delta[chosen[half:]] = -magnitude
    else:
        delta[chosen] = g.normal(0.0, magnitude, size=num_filters)
    bias = layer.bias + delta
    bias.flags.writeable = False
    return model.replace_layer(layer_idx, Layer(layer.spec, layer.weights, bias))


# ------------------------------------------------------------ variance model


@dataclass(frozen=True)
class VarianceParams:
    mu_w: float
    sigma_w: float
    mu_dw: float
    sigma_dw: float
    mu_a: float
    sigma_a: float
    n: int

    def __post_init__(self):
        if min(self.sigma_w, self.sigma_dw, self.sigma_a) < 0 or self.n < 1:
            raise ValueError("sigmas must be >= 0 and n >= 1")


def predicted_excess_variance(p: VarianceParams) -> float:
    """var(sum (W+dW) A) - var(sum W A) for independent Gaussian W, dW, A."""
    return p.n * (
        p.sigma_dw**2 * p.sigma_a**2
        + p.sigma_dw**2 * p.mu_a**2
        + p.sigma_a**2 * p.mu_dw**2
        + 2 * p.sigma_a**2 * p.mu_w * p.mu_dw
    )


def empirical_excess_variance(p: VarianceParams, samples: int, seed: int = 0,
                              chunk: int = 20000) -> float:
    """Monte Carlo estimate of the excess output variance.

    Each trial draws n weights, n errors and n activations and forms both dot
    products from the same draws. Variances use pooled chunk moments.
    """
    g = rng(seed)
    count = 0
    stats = {"o": (0.0, 0.0), "q": (0.0, 0.0)}  # running (mean, M2)
    left = samples
    while left > 0:
        b = min(chunk, left)
        w = g.normal(p.mu_w, p.sigma_w, size=(b, p.n))
        dw = g.normal(p.mu_dw, p.sigma_dw, size=(b, p.n))
        a = g.normal(p.mu_a, p.sigma_a, size=(b, p.n))
        o = np.einsum("ij,ij->i", w, a)
        oq = o + np.einsum("ij,ij->i", dw, a)
        for key, vals in (("o", o), ("q", oq)):
            bm = float(vals.mean())
            stats[key] = _merge(count, *stats[key], b, bm, float(np.sum((vals - bm) ** 2)))
        count += b
        left -= b
    m2_o, m2_q = stats["o"][1], stats["q"][1]
    return (m2_q - m2_o) / (count - 1)


def _merge(n_a, mean_a, m2_a, n_b, mean_b, m2_b):
    n = n_a + n_b
    delta = mean_b - mean_a
    return mean_a + delta * n_b / n, m2_a + m2_b + delta * delta * n_a * n_b / n


def random_variance_params(g: np.random.Generator) -> VarianceParams:
    """One draw from the parameter domain used for sweeps."""
    return VarianceParams(
        mu_w=float(g.uniform(-0.1, 0.1)),
        sigma_w=float(g.uniform(0.05, 0.5)),
        mu_dw=float(g.uniform(-0.05, 0.05)),
        sigma_dw=float(g.uniform(0.05, 0.2)),
        mu_a=float(g.uniform(0.0, 1.0)),
        sigma_a=float(g.uniform(0.5, 1.5)),
        n=int(g.integers(9, 257)),
    )


def variance_sweep(sets: int, samples: int, seed: int = 0) -> list[dict]:
    g = rng(seed)
    rows = []
    for k in range(sets):
        p = random_variance_params(g)
        pred = predicted_excess_variance(p)
        emp = empirical_excess_variance(p, samples, seed=seed * 1000 + k + 1)
        rows.append({"set": k, **p.__dict__, "predicted": pred, "empirical": emp})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
