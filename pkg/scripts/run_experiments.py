"""Regenerate the experiment CSVs on the bundled CNN fixture.

Writes sweep.csv (accuracy and PDP per format and activation width), the
compensation on/off comparison, bias-noise drops, feature-map correlations and
the excess-variance check into --out.
"""

import argparse
import csv
from pathlib import Path

from elpq.cli import bundled_formats, fixture_path, main as cli
from elpq.driver import layer_output_mse
from elpq.engine import QuantizedModel, calibrate, evaluate_accuracy
from elpq.quantizer import quantize_model
from elpq.tensorio import load_dataset, load_model


def run(argv):
    code = cli(argv)
    if code != 0:
        raise SystemExit(f"elpq {' '.join(argv[:1])} exited with {code}")


def compensation_table(out: Path, act_bits):
    base = fixture_path("digits_cnn")
    model = load_model(base / "model.json")
    test = load_dataset(base / "test.json")
    calib = load_dataset(base / "calib.json")
    configs = {b: calibrate(model, calib.images, b) for b in act_bits}
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["format", "compensated", "act_bits", "accuracy", "layer", "mse"])
        for name, f in bundled_formats().items():
            for comp in (False, True):
                qw, _ = quantize_model(model, f.spec, comp)
                qmodel = QuantizedModel(model, qw)
                for b in act_bits:
                    writer.writerow([name, comp, b, evaluate_accuracy(qmodel, test, configs[b]), "", ""])
                for layer, mse in layer_output_mse(model, qw, test.images).items():
                    writer.writerow([name, comp, "", "", layer, repr(mse)])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--samples", type=int, default=100_000)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = str(fixture_path("digits_cnn", "model.json"))
    data = str(fixture_path("digits_cnn", "test.json"))

    run(["sweep", "--config", str(fixture_path("fixtures", "sweep.json")), "--out", str(out / "sweep.csv")])
    compensation_table(out / "compensation.csv", [8, 6, 4])
    run(["analyze", "dist", "--model", model, "--out", str(out / "distribution.csv")])
    for layer in ("conv1", "conv3", "fc1"):
        for mode in ("constant", "split_sign", "gaussian"):
            run(["analyze", "bias-noise", "--model", model, "--data", data, "--layer", layer,
                 "--mode", mode, "--magnitudes", "0.1", "0.3", "1", "3", "10", "--seeds", "3",
                 "--out", str(out / f"bias_{layer}_{mode}.csv")])
    for layer in ("conv2", "conv3"):
        run(["analyze", "intra-corr", "--model", model, "--data", data, "--layer", layer,
             "--images", "50", "--out", str(out / f"intra_{layer}.csv")])
        run(["analyze", "inter-corr", "--model", model, "--data", data, "--layer", layer,
             "--images", "50", "--out", str(out / f"inter_{layer}.csv")])
    run(["analyze", "variance", "--sets", "20", "--samples", str(args.samples),
         "--out", str(out / "variance.csv")])
    print(f"wrote results to {out}/")


if __name__ == "__main__":
    main()
