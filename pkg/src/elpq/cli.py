"""Command line entry point: ``elpq <command> ...``.

Exit codes: 0 success, 2 accuracy constraint not met, 1 error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import analysis, driver, engine, systolic
from .elpbsd import FormatSpec, parse_format
from .quantizer import quantize_model
from .tensorio import load_dataset, load_model

EXIT_OK, EXIT_ERROR, EXIT_UNMET = 0, 1, 2


def fixture_path(*parts: str) -> Path:
    return Path(str(resources.files("elpq").joinpath("data", *parts)))


def bundled_formats() -> dict[str, driver.SweepFormat]:
    doc = json.loads(fixture_path("fixtures", "formats.json").read_text())
    return {f.name: f for f in driver.load_formats(doc)}


def resolve_format(text: str) -> FormatSpec:
    """A bundled format name, inline JSON, or a path to a JSON file."""
    named = bundled_formats()
    if text in named:
        return named[text].spec
    return parse_format(text)


def load_any(path) -> engine.QuantizedModel | None:
    """Quantized model if the manifest is quantized, else None."""
    return driver.load_quantized_model(path) if driver.is_quantized_manifest(path) else None


def emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _calib(args, data):
    return load_dataset(args.calib) if getattr(args, "calib", None) else None


# -------------------------------------------------------------------- commands


def cmd_quantize(args) -> int:
    model = load_model(args.model)
    spec = resolve_format(args.format)
    qweights, reports = quantize_model(model, spec, not args.no_compensate, args.mode)
    qmodel = engine.QuantizedModel(model, qweights)
    driver.save_quantized_model(qmodel, args.save)
    summary = {
        "format": spec.label(),
        "saved": str(args.save),
        "layers": [
            {
                "name": model.layers[i].name,
                "scale": qweights[i].scale,
                "flips": reports[model.layers[i].name].total_flips,
            }
            for i in model.weighted_indices()
        ],
    }
    emit(dump(summary), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    data = load_dataset(args.data)
    qmodel = load_any(args.model)
    result = {"act_bits": args.act_bits}
    if qmodel is None:
        model = load_model(args.model)
        if args.act_bits is None:
            result["accuracy"] = engine.float_accuracy(model, data)
        else:
            images = (_calib(args, data) or data.subset(200)).images
            fp = engine.calibrate(model, images, args.act_bits)
            result["accuracy"] = engine.float_accuracy(model, data, act_bits=fp.act_bits,
                                                       frac_bits=fp.frac_bits)
            result["frac_bits"] = list(fp.frac_bits)
        result["weights"] = "float"
    else:
        fp = driver.stored_fixed_point(args.model)
        if fp is None or (args.act_bits is not None and args.act_bits != fp.act_bits):
            if args.act_bits is None:
                raise ValueError("--act-bits is required for a manifest without a stored grid")
            images = (_calib(args, data) or data.subset(200)).images
            fp = engine.calibrate(qmodel.model, images, args.act_bits)
        result["act_bits"] = fp.act_bits
        result["frac_bits"] = list(fp.frac_bits)
        result["accuracy"] = engine.evaluate_accuracy(qmodel, data, fp)
        result["weights"] = "quantized"
    emit(dump(result), args.out)
    return EXIT_OK


def _method_cfg(args) -> driver.MethodologyConfig:
    return driver.MethodologyConfig(
        format_spec=resolve_format(args.format),
        ac=args.ac,
        bw_max=args.bw_max,
        bw_min=args.bw_min,
        eval_subset_size=args.subset,
        compensate=not args.no_compensate,
    )


def cmd_search(args) -> int:
    model, data = load_model(args.model), load_dataset(args.data)
    res = driver.search_cbwa(model, data, _method_cfg(args), _calib(args, data))
    emit(dump({"cbwa": res.cbwa, "constraint_met": res.constraint_met, "trace": res.trace}), args.out)
    return EXIT_OK if res.constraint_met else EXIT_UNMET


def cmd_run(args) -> int:
    model, data = load_model(args.model), load_dataset(args.data)
    qmodel, report = driver.run_pipeline(model, data, _method_cfg(args), _calib(args, data))
    if args.save:
        driver.save_quantized_model(qmodel, args.save, driver.final_fixed_point(report))
    emit(report.to_json(), args.out)
    return EXIT_OK if report.constraint_met else EXIT_UNMET


def cmd_sweep(args) -> int:
    cfg_path = Path(args.config)
    cfg = json.loads(cfg_path.read_text())
    base = cfg_path.parent

    def rel(key):
        return base / cfg[key] if cfg.get(key) else None

    model, data = load_model(rel("model")), load_dataset(rel("data"))
    calib = load_dataset(rel("calib")) if cfg.get("calib") else None
    fmt_doc = cfg["formats"]
    if isinstance(fmt_doc, str):
        fmt_doc = json.loads((base / fmt_doc).read_text())
    if cfg.get("only_sweep"):
        fmt_doc = [f for f in fmt_doc if f.get("sweep")]
    formats = driver.load_formats(fmt_doc)
    cost = systolic.CostTable.load(rel("cost")) if cfg.get("cost") else None
    rows = driver.sweep(model, data, formats, list(cfg["act_bits"]), cost, calib,
                        bool(cfg.get("compensate", True)))
    emit(driver.rows_csv(rows), args.out)
    return EXIT_OK


# --------------------------------------------------------------------- analyze


def _layer_index(model, name: str) -> int:
    for i, layer in enumerate(model.layers):
        if layer.name == name:
            return i
    raise KeyError(f"no layer named {name!r}")


def _layer_inputs(model, images, idx: int) -> np.ndarray:
    """Float activations entering layer ``idx``."""
    x = engine._as_batch(images, model.input_dims)
    for layer in model.layers[:idx]:
        x = engine.layer_forward_float(layer, x)
    return x


def cmd_analyze(args) -> int:
    kind = args.what
    if kind == "variance":
        if args.canonical:
            p = analysis.VarianceParams(0.0, 0.0, 0.0, 0.1, 0.0, 1.0, 100)
            rows = [{**p.__dict__, "predicted": analysis.predicted_excess_variance(p),
                     "empirical": analysis.empirical_excess_variance(p, args.samples, args.seed)}]
        else:
            rows = analysis.variance_sweep(args.sets, args.samples, args.seed)
        emit(analysis.rows_to_csv(rows), args.out)
        return EXIT_OK

    model = load_model(args.model)
    if kind == "dist":
        rows = []
        for layer in model.layers:
            if not layer.spec.weighted:
                continue
            for part, arr in (("weights", layer.weights), ("bias", layer.bias)):
                if arr is not None:
                    rows.append({"layer": layer.name, "tensor": part, **analysis.distribution_stats(arr)})
        emit(analysis.rows_to_csv(rows), args.out)
        return EXIT_OK

    data = load_dataset(args.data).subset(args.images)
    if kind in ("intra-corr", "inter-corr"):
        idx = _layer_index(model, args.layer)
        acts = _layer_inputs(model, data.images, idx)
        if kind == "intra-corr":
            maps = [m for img in acts for m in img]
            rows = [{"shift_i": i, "shift_j": j, "r_mean": r, "r_std": s, "n": n}
                    for i, j, r, s, n in analysis.intra_corr_map(maps, args.max_shift)]
        else:
            rows = []
            for k, img in enumerate(acts):
                corr, constant = analysis.inter_corr(img)
                for v in analysis.off_diagonal(corr):
                    rows.append({"image": k, "r": float(v)})
        emit(analysis.rows_to_csv(rows), args.out)
        return EXIT_OK

    # bias-noise
    idx = _layer_index(model, args.layer)
    base = engine.float_accuracy(model, data)
    n_filters = args.filters if args.filters is not None else model.layers[idx].bias.shape[0]
    rows = []
    for mag in args.magnitudes:
        for seed in range(args.seeds):
            noisy = analysis.inject_bias_noise(model, idx, n_filters, args.mode, mag, seed)
            acc = engine.float_accuracy(noisy, data)
            rows.append({"layer": args.layer, "mode": args.mode, "magnitude": mag, "seed": seed,
                         "accuracy": acc, "drop": base - acc})
    emit(analysis.rows_to_csv(rows), args.out)
    return EXIT_OK


# -------------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    data = load_dataset(args.data).subset(args.images)
    qmodel = load_any(args.model)
    if qmodel is None:
        if not args.format:
            raise ValueError("--format is required with a float model")
        model = load_model(args.model)
        qmodel = engine.QuantizedModel(model, quantize_model(model, resolve_format(args.format))[0])
    fp = driver.stored_fixed_point(args.model)
    if fp is None or fp.act_bits != args.act_bits:
        fp = engine.calibrate(qmodel.model, data.images, args.act_bits)
    cost = systolic.CostTable.load(args.cost) if args.cost else None
    trace = {}
    engine.infer(qmodel, data.images, fp, trace=trace)
    layers = []
    for i, (x, acc) in sorted(trace.items()):
        layer, qt = qmodel.layers[i], qmodel.weights[i]
        digits = len(qt.format.digits) if qt.format is not None else 1
        cfg = systolic.ArrayConfig.parse(args.array, digits)
        sim = systolic.simulate_layer(layer, qt, x, cfg)
        entry = {"layer": layer.name, **sim.summary(),
                 "matches_engine": bool(np.array_equal(sim.outputs, acc))}
        if cost is not None and args.design:
            est = systolic.estimate_pdp(sim, cost, args.design, fp.act_bits)
            entry.update(pdp_pj=est.pdp_pj, energy_pj=est.energy_pj)
        layers.append(entry)
    emit(dump({"array": args.array, "act_bits": fp.act_bits, "layers": layers}), args.out)
    return EXIT_OK if all(e["matches_engine"] for e in layers) else EXIT_ERROR


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elpq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--model", required=True, help="model manifest JSON")
        if data:
            sp.add_argument("--data", required=True, help="dataset manifest JSON")
        sp.add_argument("--out", help="write output here instead of stdout")

    q = sub.add_parser("quantize", help="quantize a float model's weights")
    common(q, data=False)
    q.add_argument("--format", required=True, help="bundled name, JSON text or JSON file")
    q.add_argument("--no-compensate", action="store_true")
    q.add_argument("--mode", choices=("channel", "filter"), default="channel")
    q.add_argument("--save", required=True, help="quantized manifest path to write")
    q.set_defaults(func=cmd_quantize)

    e = sub.add_parser("eval", help="top-1 accuracy of a float or quantized model")
    common(e)
    e.add_argument("--act-bits", type=int)
    e.add_argument("--calib", help="calibration dataset manifest")
    e.set_defaults(func=cmd_eval)

    for name, func, help_ in (("search", cmd_search, "critical activation bit-width search"),
                              ("run", cmd_run, "full quantization methodology")):
        s = sub.add_parser(name, help=help_)
        common(s)
        s.add_argument("--format", default="F1")
        s.add_argument("--ac", type=float, default=0.01, help="allowed absolute accuracy loss")
        s.add_argument("--bw-max", type=int, default=8)
        s.add_argument("--bw-min", type=int, default=2)
        s.add_argument("--subset", type=int, help="images used during the search")
        s.add_argument("--calib", help="calibration dataset manifest")
        s.add_argument("--no-compensate", action="store_true")
        if name == "run":
            s.add_argument("--save", help="also write the quantized model here")
        s.set_defaults(func=func)

    sw = sub.add_parser("sweep", help="format x activation-width accuracy/PDP sweep")
    sw.add_argument("--config", required=True)
    sw.add_argument("--out")
    sw.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="statistical studies")
    asub = a.add_subparsers(dest="what", required=True)
    d = asub.add_parser("dist")
    common(d, data=False)
    for name in ("intra-corr", "inter-corr"):
        c = asub.add_parser(name)
        common(c)
        c.add_argument("--layer", required=True, help="correlate the inputs of this layer")
        c.add_argument("--images", type=int, default=20)
        c.add_argument("--max-shift", type=int, default=3)
    b = asub.add_parser("bias-noise")
    common(b)
    b.add_argument("--layer", required=True)
    b.add_argument("--mode", choices=analysis.NOISE_MODES, default="constant")
    b.add_argument("--magnitudes", type=float, nargs="+", required=True)
    b.add_argument("--filters", type=int)
    b.add_argument("--seeds", type=int, default=3)
    b.add_argument("--images", type=int)
    v = asub.add_parser("variance")
    v.add_argument("--sets", type=int, default=20)
    v.add_argument("--samples", type=int, default=100_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--canonical", action="store_true", help="only the single reference case")
    v.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    sim = sub.add_parser("simulate", help="run layers on the systolic array model")
    common(sim)
    sim.add_argument("--array", default="32x32", help="RxC")
    sim.add_argument("--cost", help="cost table JSON")
    sim.add_argument("--design", help="PE design name in the cost table")
    sim.add_argument("--format", help="needed when --model is a float model")
    sim.add_argument("--act-bits", type=int, default=8)
    sim.add_argument("--images", type=int, default=4)
    sim.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as e:
        print(f"elpq: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
