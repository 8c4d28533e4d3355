"""Tensor container (CTNS), model manifests and labelled datasets.

CTNS layout (little-endian)::

    0..3   magic b"CTNS"
    4..5   version, u16 (= 1)
    6      dtype, u8 (0=f32, 1=i32, 2=u8)
    7      rank, u8 (1..4)
    8..    rank x u32 dims
    ...    row-major payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CTNS"
VERSION = 1
MAX_RANK = 4

DTYPE_CODES = {"f32": 0, "i32": 1, "u8": 2}
_CODE_TO_DTYPE = {v: k for k, v in DTYPE_CODES.items()}
NUMPY_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4"), "u8": np.dtype("u1")}

LAYER_KINDS = ("conv", "fc", "relu", "maxpool")


class LoadError(ValueError):
    """A file could not be decoded. ``field`` names the offending part."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Tensor:
    dtype: str
    dims: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        if self.dtype not in DTYPE_CODES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        dims = tuple(int(d) for d in self.dims)
        if not 1 <= len(dims) <= MAX_RANK:
            raise ValueError(f"rank must be 1..{MAX_RANK}, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        data = np.ascontiguousarray(self.data, dtype=NUMPY_DTYPES[self.dtype]).reshape(-1)
        if data.size != int(np.prod(dims)):
            raise ValueError(f"product(dims)={int(np.prod(dims))} != len(data)={data.size}")
        data.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array, dtype: str | None = None) -> "Tensor":
        array = np.asarray(array)
        if dtype is None:
            if array.dtype == np.uint8:
                dtype = "u8"
            elif np.issubdtype(array.dtype, np.integer):
                dtype = "i32"
            else:
                dtype = "f32"
        return cls(dtype, array.shape, array.reshape(-1))

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.dims)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.dims == other.dims
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def encode_tensor(t: Tensor) -> bytes:
    header = struct.pack("<4sHBB", MAGIC, VERSION, DTYPE_CODES[t.dtype], len(t.dims))
    header += struct.pack(f"<{len(t.dims)}I", *t.dims)
    return header + t.data.tobytes()


def decode_tensor(buf: bytes) -> Tensor:
    if len(buf) < 8:
        raise LoadError("header", f"need 8 bytes, got {len(buf)}")
    magic, version, dcode, rank = struct.unpack_from("<4sHBB", buf, 0)
    if magic != MAGIC:
        raise LoadError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise LoadError("version", f"unsupported version {version}")
    if dcode not in _CODE_TO_DTYPE:
        raise LoadError("dtype", f"unsupported dtype code {dcode}")
    if not 1 <= rank <= MAX_RANK:
        raise LoadError("rank", f"unsupported rank {rank}")
    off = 8 + 4 * rank
    if len(buf) < off:
        raise LoadError("dims", "file ends inside the dims block")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    if any(d == 0 for d in dims):
        raise LoadError("dims", f"zero-sized dimension in {dims}")
    dtype = _CODE_TO_DTYPE[dcode]
    npd = NUMPY_DTYPES[dtype]
    count = int(np.prod(dims))
    need = count * npd.itemsize
    payload = buf[off:]
    if len(payload) != need:
        what = "truncated" if len(payload) < need else "oversized"
        raise LoadError("payload", f"{what}: expected {need} bytes, got {len(payload)}")
    return Tensor(dtype, dims, np.frombuffer(payload, dtype=npd).copy())


def write_tensor(t: Tensor, path) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path) -> Tensor:
    return decode_tensor(Path(path).read_bytes())


# --------------------------------------------------------------------------- models


@dataclass(frozen=True)
class LayerDef:
    name: str
    kind: str
    weights_ref: str | None = None
    bias_ref: str | None = None
    stride: int = 1
    pad: int = 0
    pool_size: int = 2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        weighted = self.kind in ("conv", "fc")
        if weighted and self.weights_ref is None:
            raise ValueError(f"layer {self.name!r}: {self.kind} layer needs weights")
        if not weighted and (self.weights_ref is not None or self.bias_ref is not None):
            raise ValueError(f"layer {self.name!r}: {self.kind} layer takes no tensors")
        if self.stride < 1 or self.pad < 0 or self.pool_size < 1:
            raise ValueError(f"layer {self.name!r}: bad stride/pad/pool_size")

    @property
    def weighted(self) -> bool:
        return self.kind in ("conv", "fc")


@dataclass(frozen=True)
class Layer:
    """A resolved layer: definition plus its float weight/bias arrays."""

    spec: LayerDef
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def kind(self) -> str:
        return self.spec.kind


@dataclass(frozen=True)
class Model:
    layers: tuple[Layer, ...]
    input_dims: tuple[int, ...]

    def weighted_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.spec.weighted]

    def replace_layer(self, index: int, layer: Layer) -> "Model":
        layers = list(self.layers)
        layers[index] = layer
        return Model(tuple(layers), self.input_dims)

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        if self.input_dims != other.input_dims or len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.spec != b.spec:
                return False
            for x, y in ((a.weights, b.weights), (a.bias, b.bias)):
                if (x is None) != (y is None):
                    return False
                if x is not None and (x.shape != y.shape or x.tobytes() != y.tobytes()):
                    return False
        return True

    __hash__ = None


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def infer_shapes(model: Model) -> list[tuple[int, ...]]:
    """Return the activation shape entering each layer plus the final output shape.

    Raises ShapeError on the first incompatibility between neighbours.
    """
    shape = tuple(model.input_dims)
    shapes = [shape]
    for layer in model.layers:
        kind = layer.kind
        if kind == "conv":
            w = layer.weights
            if w.ndim != 4:
                raise ShapeError(f"{layer.name}: conv weights must be 4D, got {w.shape}")
            if len(shape) != 3:
                raise ShapeError(f"{layer.name}: conv expects CxHxW input, got {shape}")
            oc, ic, kh, kw = w.shape
            if ic != shape[0]:
                raise ShapeError(
                    f"{layer.name}: weights expect {ic} input channels, producer gives {shape[0]}"
                )
            oh = _conv_out(shape[1], kh, layer.spec.stride, layer.spec.pad)
            ow = _conv_out(shape[2], kw, layer.spec.stride, layer.spec.pad)
            if oh < 1 or ow < 1:
                raise ShapeError(f"{layer.name}: kernel larger than padded input")
            shape = (oc, oh, ow)
        elif kind == "fc":
            w = layer.weights
            if w.ndim != 2:
                raise ShapeError(f"{layer.name}: fc weights must be 2D, got {w.shape}")
            n_in = int(np.prod(shape))
            if w.shape[1] != n_in:
                raise ShapeError(f"{layer.name}: weights expect {w.shape[1]} inputs, got {n_in}")
            shape = (w.shape[0],)
        elif kind == "maxpool":
            if len(shape) != 3:
                raise ShapeError(f"{layer.name}: maxpool expects CxHxW input, got {shape}")
            p, s = layer.spec.pool_size, layer.spec.stride
            shape = (shape[0], (shape[1] - p) // s + 1, (shape[2] - p) // s + 1)
            if shape[1] < 1 or shape[2] < 1:
                raise ShapeError(f"{layer.name}: pool window larger than input")
        if layer.spec.weighted and layer.bias is not None and layer.bias.shape != (shape[0],):
            raise ShapeError(f"{layer.name}: bias shape {layer.bias.shape} != ({shape[0]},)")
        shapes.append(shape)
    return shapes


def load_model(manifest_path) -> Model:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise LoadError("manifest", str(e)) from None
    base = manifest_path.parent
    layers = []
    for entry in doc["layers"]:
        spec = LayerDef(
            name=entry["name"],
            kind=entry["kind"],
            weights_ref=entry.get("weights"),
            bias_ref=entry.get("bias"),
            stride=int(entry.get("stride", 1)),
            pad=int(entry.get("pad", 0)),
            pool_size=int(entry.get("pool_size", 2)),
        )
        arrays = []
        for ref in (spec.weights_ref, spec.bias_ref):
            if ref is None:
                arrays.append(None)
                continue
            p = base / ref
            if not p.exists():
                raise FileNotFoundError(f"{spec.name}: missing tensor file {p}")
            arr = read_tensor(p).array.astype(np.float64)
            arr.flags.writeable = False
            arrays.append(arr)
        layers.append(Layer(spec, *arrays))
    model = Model(tuple(layers), tuple(int(d) for d in doc["input_dims"]))
    infer_shapes(model)
    return model


def save_model(model: Model, manifest_path) -> None:
    """Write a manifest plus one CTNS file per weight/bias next to it."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    base.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer in model.layers:
        s = layer.spec
        entry = {"name": s.name, "kind": s.kind}
        if s.weighted:
            wref = s.weights_ref or f"{s.name}.w.ctns"
            write_tensor(Tensor.from_array(layer.weights.astype(np.float32)), base / wref)
            entry["weights"] = wref
            if layer.bias is not None:
                bref = s.bias_ref or f"{s.name}.b.ctns"
                write_tensor(Tensor.from_array(layer.bias.astype(np.float32)), base / bref)
                entry["bias"] = bref
        entry.update(stride=s.stride, pad=s.pad)
        if s.kind == "maxpool":
            entry["pool_size"] = s.pool_size
        entries.append(entry)
    doc = {"input_dims": list(model.input_dims), "layers": entries}
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n")


# ------------------------------------------------------------------------- datasets


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, C, H, W] float
    labels: np.ndarray  # [N] int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n])


def load_dataset(path) -> Dataset:
    """Load a dataset manifest ``{"images": <ctns>, "labels": <ctns>}``."""
    path = Path(path)
    doc = json.loads(path.read_text())
    images = read_tensor(path.parent / doc["images"]).array.astype(np.float64)
    labels = read_tensor(path.parent / doc["labels"]).array.astype(np.int64)
    return Dataset(images, labels)


def save_dataset(ds: Dataset, path, stem: str = "data") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(Tensor.from_array(ds.images.astype(np.float32)), path.parent / f"{stem}.x.ctns")
    write_tensor(Tensor.from_array(ds.labels.astype(np.int32)), path.parent / f"{stem}.y.ctns")
    doc = {"images": f"{stem}.x.ctns", "labels": f"{stem}.y.ctns"}
    path.write_text(json.dumps(doc, indent=2) + "\n")
