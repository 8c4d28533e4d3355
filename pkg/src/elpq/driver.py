"""The quantization methodology: activation bit-width search, per-layer weight
quantization with compensation, the accuracy-constraint loop and sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .elpbsd import FormatSpec, bit_width, read_quantized, write_quantized
from .engine import (
    FixedPointConfig,
    QuantizedModel,
    calibrate,
    evaluate_accuracy,
    float_accuracy,
)
from .quantizer import QuantizedTensor, quantize_model
from .systolic import CostTable
from .tensorio import (
    Dataset,
    Layer,
    LayerDef,
    Model,
    Tensor,
    infer_shapes,
    read_tensor,
    write_tensor,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MethodologyConfig:
    format_spec: FormatSpec
    ac: float = 0.01
    bw_max: int = 8
    bw_min: int = 2
    eval_subset_size: int | None = None
    compensate: bool = True
    mode: str = "channel"
    acc_bits: int = 32

    def __post_init__(self):
        if not self.bw_min <= self.bw_max:
            raise ValueError("bw_min must not exceed bw_max")
        if not 2 <= self.bw_min:
            raise ValueError("bw_min must be at least 2")
        if not 0 <= self.ac < 1 and self.ac != 1.0:
            raise ValueError("ac must lie in [0, 1]")


@dataclass
class SearchResult:
    cbwa: int
    constraint_met: bool
    trace: list[tuple[int, float]]  # (act_bits, accuracy) in evaluation order


@dataclass
class RunReport:
    baseline_acc: float
    final_acc: float
    cbwa: int
    initial_cbwa: int
    constraint_met: bool
    scale_factors: list[float]
    flips: list[int]
    bits_per_weight: int
    evaluations: int
    frac_bits: list[int]
    search_trace: list[tuple[int, float]] = field(default_factory=list)
    pdp_estimates: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def within_constraint(baseline: float, acc: float, ac: float) -> bool:
    """``baseline - acc <= ac``, ignoring float noise from count ratios."""
    return baseline - acc <= ac + 1e-9


def _calib_images(dataset: Dataset, calib: Dataset | None, n: int = 200) -> np.ndarray:
    return (calib if calib is not None else dataset.subset(n)).images


def search_cbwa(model: Model, dataset: Dataset, cfg: MethodologyConfig,
                calib: Dataset | None = None, baseline: float | None = None) -> SearchResult:
    """Walk activation bit-widths down from ``bw_max`` with float weights.

    Stops at the first width whose accuracy loss exceeds ``ac`` and returns the
    width above it. If ``bw_max`` already fails, returns ``bw_max`` unmet.
    """
    data = dataset.subset(cfg.eval_subset_size)
    if baseline is None:
        baseline = float_accuracy(model, data)
    images = _calib_images(dataset, calib)
    trace = []
    passing = None
    for bits in range(cfg.bw_max, cfg.bw_min - 1, -1):
        fp = calibrate(model, images, bits, cfg.acc_bits)
        acc = float_accuracy(model, data, act_bits=bits, frac_bits=fp.frac_bits)
        trace.append((bits, acc))
        log.info("search: act_bits=%d accuracy=%.4f", bits, acc)
        if not within_constraint(baseline, acc, cfg.ac):
            break
        passing = bits
    if passing is None:
        return SearchResult(cfg.bw_max, False, trace)
    return SearchResult(passing, True, trace)


def run_pipeline(model: Model, dataset: Dataset, cfg: MethodologyConfig,
                 calib: Dataset | None = None) -> tuple[QuantizedModel, RunReport]:
    baseline = float_accuracy(model, dataset)
    search = search_cbwa(model, dataset, cfg, calib,
                         baseline if cfg.eval_subset_size is None else None)
    cbwa = search.cbwa
    qweights, reports = quantize_model(model, cfg.format_spec, cfg.compensate, cfg.mode)
    qmodel = QuantizedModel(model, qweights)
    images = _calib_images(dataset, calib)
    evaluations = 0
    while True:
        fp = calibrate(model, images, cbwa, cfg.acc_bits)
        acc = evaluate_accuracy(qmodel, dataset, fp)
        evaluations += 1
        log.info("check: act_bits=%d accuracy=%.4f baseline=%.4f", cbwa, acc, baseline)
        met = within_constraint(baseline, acc, cfg.ac)
        if met or cbwa >= cfg.bw_max:
            break
        cbwa += 1
    weighted = model.weighted_indices()
    report = RunReport(
        baseline_acc=baseline,
        final_acc=acc,
        cbwa=cbwa,
        initial_cbwa=search.cbwa,
        constraint_met=bool(met),
        scale_factors=[qweights[i].scale for i in weighted],
        flips=[reports[model.layers[i].name].total_flips for i in weighted],
        bits_per_weight=bit_width(cfg.format_spec),
        evaluations=evaluations,
        frac_bits=list(fp.frac_bits),
        search_trace=search.trace,
    )
    return qmodel, report


def final_fixed_point(report: RunReport, acc_bits: int = 32) -> FixedPointConfig:
    return FixedPointConfig(report.cbwa, tuple(report.frac_bits), acc_bits)


# ---------------------------------------------------------------------- sweeps


def count_macs(model: Model) -> int:
    """Multiply-accumulates for one inference."""
    shapes = infer_shapes(model)
    total = 0
    for layer, out in zip(model.layers, shapes[1:]):
        if layer.kind == "conv":
            _, ic, kh, kw = layer.weights.shape
            total += int(np.prod(out)) * ic * kh * kw
        elif layer.kind == "fc":
            total += int(layer.weights.size)
    return total


@dataclass(frozen=True)
class SweepFormat:
    name: str
    spec: FormatSpec
    design: str | None = None


def sweep(model: Model, dataset: Dataset, formats: list[SweepFormat], act_bits: list[int],
          cost: CostTable | None = None, calib: Dataset | None = None,
          compensate: bool = True, acc_bits: int = 32) -> list[dict]:
    """Accuracy (and PE PDP where a design is known) for every format x width.

    Rows come out ordered by (format index, position in ``act_bits``).
    """
    images = _calib_images(dataset, calib)
    macs = count_macs(model)
    configs = {b: calibrate(model, images, b, acc_bits) for b in act_bits}
    rows = []
    for f in formats:
        qweights, _ = quantize_model(model, f.spec, compensate)
        qmodel = QuantizedModel(model, qweights)
        for b in act_bits:
            acc = evaluate_accuracy(qmodel, dataset, configs[b])
            row = {
                "format": f.name,
                "spec": f.spec.label(),
                "bits_per_weight": bit_width(f.spec),
                "act_bits": b,
                "accuracy": acc,
                "pdp_pj": "",
                "energy_uj": "",
            }
            if cost is not None and f.design is not None:
                entry = cost.lookup(f.design, b)
                row["pdp_pj"] = entry.pdp_pj
                row["energy_uj"] = entry.energy_per_mac_pj * macs * 1e-6
            rows.append(row)
    return rows


def rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def load_formats(doc) -> list[SweepFormat]:
    """Accept ``[{"name", "design"?, "format": {...}}]`` entries."""
    out = []
    for k, entry in enumerate(doc):
        spec = FormatSpec.from_dict(entry["format"] if "format" in entry else entry)
        out.append(SweepFormat(entry.get("name", spec.label()), spec, entry.get("design")))
    return out


# ------------------------------------------------------------ quantized models


def save_quantized_model(qmodel: QuantizedModel, manifest_path,
                         fixed_point: FixedPointConfig | None = None) -> None:
    """Write a quantized manifest: CQNT (ELP) or i32 CTNS (uniform) weights,
    f32 biases. ``fixed_point`` records the activation grid chosen for it."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    base.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, layer in enumerate(qmodel.model.layers):
        s = layer.spec
        entry = {"name": s.name, "kind": s.kind, "stride": s.stride, "pad": s.pad}
        if s.kind == "maxpool":
            entry["pool_size"] = s.pool_size
        if s.weighted:
            qt = qmodel.weights[i]
            if qt.format is not None:
                ref = f"{s.name}.w.cqnt"
                write_quantized(base / ref, qt.codes, qt.dims, qt.format)
            else:
                ref = f"{s.name}.w.ctns"
                write_tensor(Tensor.from_array(qt.int_levels.astype(np.int32)), base / ref)
                entry["scale"] = qt.scale
            entry["weights"] = ref
            if layer.bias is not None:
                bref = f"{s.name}.b.ctns"
                write_tensor(Tensor.from_array(layer.bias.astype(np.float32)), base / bref)
                entry["bias"] = bref
        entries.append(entry)
    doc = {"quantized": True, "input_dims": list(qmodel.model.input_dims), "layers": entries}
    if fixed_point is not None:
        doc["fixed_point"] = {
            "act_bits": fixed_point.act_bits,
            "frac_bits": list(fixed_point.frac_bits),
            "acc_bits": fixed_point.acc_bits,
        }
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n")


def load_quantized_model(manifest_path) -> QuantizedModel:
    from .elpbsd import code_value_lut

    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    layers, qweights = [], {}
    for i, e in enumerate(doc["layers"]):
        spec = LayerDef(e["name"], e["kind"], e.get("weights"), e.get("bias"),
                        int(e.get("stride", 1)), int(e.get("pad", 0)), int(e.get("pool_size", 2)))
        weights = bias = None
        if spec.weighted:
            ref = base / e["weights"]
            if not ref.exists():
                raise FileNotFoundError(f"{spec.name}: missing tensor file {ref}")
            if ref.suffix == ".cqnt":
                codes, _, fmt = read_quantized(ref)
                ints = code_value_lut(fmt)[codes].astype(np.int64)
                qt = QuantizedTensor(ints, codes, fmt.scale, fmt)
            else:
                ints = read_tensor(ref).array.astype(np.int64)
                bits = int(np.max(np.abs(ints))).bit_length() + 1
                qt = QuantizedTensor(ints, ints & ((1 << max(bits, 2)) - 1), float(e["scale"]))
            qweights[i] = qt
            weights = qt.values
            if spec.bias_ref is not None:
                bias = read_tensor(base / spec.bias_ref).array.astype(np.float64)
        layers.append(Layer(spec, weights, bias))
    model = Model(tuple(layers), tuple(doc["input_dims"]))
    infer_shapes(model)
    return QuantizedModel(model, qweights)


def stored_fixed_point(manifest_path) -> FixedPointConfig | None:
    fp = json.loads(Path(manifest_path).read_text()).get("fixed_point")
    if fp is None:
        return None
    return FixedPointConfig(int(fp["act_bits"]), tuple(fp["frac_bits"]), int(fp.get("acc_bits", 32)))


def is_quantized_manifest(path) -> bool:
    return bool(json.loads(Path(path).read_text()).get("quantized", False))


def layer_output_mse(model: Model, qweights: dict, images) -> dict[str, float]:
    """Output MSE of each conv/fc layer against float, per layer in isolation.

    Every layer sees the float reference input, so the number reflects only
    that layer's weight quantization.
    """
    from .engine import _as_batch, layer_forward_float

    x = _as_batch(images, model.input_dims)
    out = {}
    for i, layer in enumerate(model.layers):
        y = layer_forward_float(layer, x)
        if layer.spec.weighted:
            yq = layer_forward_float(layer, x, qweights[i].values)
            out[layer.name] = float(np.mean((yq - y) ** 2))
        x = y
    return out
