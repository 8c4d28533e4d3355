"""Train the desk-scale digits CNN and write it out as CTNS fixtures.

Needs torch and scikit-learn (not runtime dependencies of the package).
Usage: python scripts/make_fixture.py [--out src/elpq/data/digits_cnn]
"""

import argparse
from pathlib import Path

import numpy as np
import torch
from sklearn.datasets import load_digits

from elpq.tensorio import Dataset, Layer, LayerDef, Model, save_dataset, save_model


def build():
    return torch.nn.Sequential(
        torch.nn.Conv2d(1, 8, 3, padding=1), torch.nn.ReLU(), torch.nn.MaxPool2d(2),
        torch.nn.Conv2d(8, 16, 3, padding=1), torch.nn.ReLU(), torch.nn.MaxPool2d(2),
        torch.nn.Conv2d(16, 32, 3, padding=1), torch.nn.ReLU(), torch.nn.MaxPool2d(2),
        torch.nn.Flatten(), torch.nn.Linear(128, 10),
    )


def upsample(images: np.ndarray, size: int) -> np.ndarray:
    """Bilinear (align-corners) resize of [N,1,8,8] images to ``size`` x ``size``."""
    t = torch.from_numpy(images)
    return torch.nn.functional.interpolate(t, size=(size, size), mode="bilinear",
                                           align_corners=True).numpy()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="src/elpq/data/digits_cnn")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--preprocess", choices=("unit", "raw"), default="unit")
    ap.add_argument("--weight-decay", type=float, default=5e-4)
    ap.add_argument("--lr", type=float, default=0.05)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    digits = load_digits()
    x = upsample(digits.images.astype(np.float32)[:, None], 16)
    y = digits.target.astype(np.int64)
    perm = np.random.default_rng(args.seed).permutation(len(y))
    x, y = x[perm], y[perm]
    if args.preprocess == "raw":
        # 0..16 intensities minus the mean training image
        x = (x - x[500:].mean(axis=0, keepdims=True)).astype(np.float32)
    else:
        x = x / np.float32(16.0)
    x_test, y_test = x[:500], y[:500]
    x_cal, y_cal = x[500:700], y[500:700]
    x_train, y_train = x[500:], y[500:]

    net = build()
    opt = torch.optim.SGD(net.parameters(), lr=args.lr, momentum=0.9,
                          weight_decay=args.weight_decay)
    xt, yt = torch.from_numpy(x_train), torch.from_numpy(y_train)
    for epoch in range(args.epochs):
        order = torch.randperm(len(yt))
        for s in range(0, len(yt), 64):
            b = order[s : s + 64]
            opt.zero_grad()
            loss = torch.nn.functional.cross_entropy(net(xt[b]), yt[b])
            loss.backward()
            opt.step()
    with torch.no_grad():
        acc = (net(torch.from_numpy(x_test)).argmax(1).numpy() == y_test).mean()
    print(f"float test accuracy: {acc:.4f}")

    mods = list(net)
    layers = []
    kinds = []
    for m in mods:
        if isinstance(m, torch.nn.Conv2d):
            kinds.append(("conv", m))
        elif isinstance(m, torch.nn.Linear):
            kinds.append(("fc", m))
        elif isinstance(m, torch.nn.ReLU):
            kinds.append(("relu", None))
        elif isinstance(m, torch.nn.MaxPool2d):
            kinds.append(("maxpool", None))
    counts = {}
    for kind, m in kinds:
        counts[kind] = counts.get(kind, 0) + 1
        name = f"{kind}{counts[kind]}"
        if kind in ("conv", "fc"):
            w = m.weight.detach().numpy().astype(np.float32).astype(np.float64)
            b = m.bias.detach().numpy().astype(np.float32).astype(np.float64)
            pad = m.padding[0] if kind == "conv" else 0
            spec = LayerDef(name, kind, f"{name}.w.ctns", f"{name}.b.ctns", 1, pad)
            layers.append(Layer(spec, w, b))
        elif kind == "maxpool":
            layers.append(Layer(LayerDef(name, kind, stride=2, pool_size=2)))
        else:
            layers.append(Layer(LayerDef(name, kind)))
    out = Path(args.out)
    save_model(Model(tuple(layers), (1, 16, 16)), out / "model.json")
    save_dataset(Dataset(x_test.astype(np.float64), y_test), out / "test.json", "test")
    save_dataset(Dataset(x_cal.astype(np.float64), y_cal), out / "calib.json", "calib")


if __name__ == "__main__":
    main()
