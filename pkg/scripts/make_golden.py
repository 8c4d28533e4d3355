"""Freeze reference logits of the fixed-point engine on the bundled CNN.

Run once after the engine has been checked against the float reference; the
test suite then compares later engine output to these files bit for bit.
"""

import argparse
import json

import numpy as np

from elpq.cli import bundled_formats, fixture_path
from elpq.engine import QuantizedModel, calibrate, infer
from elpq.quantizer import quantize_model
from elpq.tensorio import Tensor, load_dataset, load_model, write_tensor


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--format", default="F1")
    ap.add_argument("--act-bits", type=int, default=8)
    ap.add_argument("--count", type=int, default=32)
    args = ap.parse_args()

    base = fixture_path("digits_cnn")
    model = load_model(base / "model.json")
    test = load_dataset(base / "test.json").subset(args.count)
    calib = load_dataset(base / "calib.json")
    qweights, _ = quantize_model(model, bundled_formats()[args.format].spec)
    cfg = calibrate(model, calib.images, args.act_bits)
    logits = infer(QuantizedModel(model, qweights), test.images, cfg).astype(np.float32)

    stem = f"golden_{args.format}_a{args.act_bits}"
    write_tensor(Tensor.from_array(logits), base / f"{stem}.ctns")
    meta = {"format": args.format, "act_bits": args.act_bits, "count": args.count,
            "frac_bits": list(cfg.frac_bits), "compensated": True, "logits": f"{stem}.ctns"}
    (base / f"{stem}.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote {stem}.ctns with shape {logits.shape}")


if __name__ == "__main__":
    main()
