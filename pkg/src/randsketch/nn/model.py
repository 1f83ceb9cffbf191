"""Sequential model container and its on-disk format.

A saved model is two files: a UTF-8 JSON manifest at ``path`` and a binary
blob at ``path + ".bin"``.  The blob starts with the magic ``b"PNTR"`` and a
format-version byte, followed by every parameter array as little-endian
IEEE-754 values in row-major order, in the order the manifest lists them.
Random sketches are stored only as ``(dist, rows, cols, seed)`` descriptors
and regenerated on load.
"""

from __future__ import annotations

import json
import os
from typing import Iterable

import numpy as np

from ..rng import RNG_ALGORITHM
from ..sketch import Dist, SketchOp
from .attention import ExactMha, RandMha
from .base import Layer, ParamCount, ReLU
from .conv import DenseConv2d, SkConv2d
from .linear import DenseLinear, SkLinear, SkTerm

__all__ = ["Model", "ModelFormatError", "model_save", "model_load", "FORMAT_VERSION", "MAGIC"]

FORMAT_VERSION = 1
MAGIC = b"PNTR"
_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}

LAYER_KINDS = ("DenseLinear", "SkLinear", "DenseConv2d", "SkConv2d", "ExactMha", "RandMha", "ReLU")


class ModelFormatError(ValueError):
    """Raised for malformed or inconsistent model files."""


class Model:
    """Ordered, uniquely named layers applied in sequence."""

    def __init__(self, layers: Iterable[tuple[str, Layer]] = (), dtype: str = "f64"):
        self.layers: list[tuple[str, Layer]] = []
        self.dtype = dtype
        for name, layer in layers:
            self.add(name, layer)

    def add(self, name: str, layer: Layer) -> "Model":
        if any(n == name for n, _ in self.layers):
            raise ValueError(f"duplicate layer name {name!r}")
        self.layers.append((name, layer))
        return self

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def names(self) -> list[str]:
        return [n for n, _ in self.layers]

    def __getitem__(self, name: str) -> Layer:
        for n, layer in self.layers:
            if n == name:
                return layer
        raise KeyError(name)

    def replace(self, name: str, layer: Layer) -> "Model":
        """New model sharing every layer except ``name``."""
        if name not in self.names():
            raise KeyError(name)
        return Model(((n, layer if n == name else old) for n, old in self.layers), self.dtype)

    def copy(self) -> "Model":
        return Model(((n, layer.copy()) for n, layer in self.layers), self.dtype)

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def forward_trace(self, x):
        """Output plus the input seen by every layer (for :meth:`backward`)."""
        inputs = []
        for _, layer in self.layers:
            inputs.append(x)
            x = layer.forward(x)
        return x, inputs

    def backward(self, inputs, grad_out):
        grads = {}
        g = grad_out
        for (name, layer), x in zip(reversed(self.layers), reversed(inputs)):
            g, pg = layer.backward(x, g)
            grads[name] = pg
        return g, grads

    def param_count(self) -> ParamCount:
        counts = [layer.param_count() for _, layer in self.layers]
        return ParamCount(
            sum(c.learnable for c in counts),
            sum(c.total_stored for c in counts),
            sum(c.dense_equivalent for c in counts),
        )

    def equals(self, other: "Model") -> bool:
        """Structural equality with bit-equal parameters and identical sketches."""
        if self.names() != other.names():
            return False
        for (_, a), (_, b) in zip(self.layers, other.layers):
            if a.kind != b.kind or a.config() != b.config():
                return False
            pa, pb = a.params(), b.params()
            if pa.keys() != pb.keys():
                return False
            for key in pa:
                if pa[key].shape != pb[key].shape or pa[key].tobytes() != pb[key].tobytes():
                    return False
            sa, sb = a.sketches(), b.sketches()
            if sa.keys() != sb.keys() or not all(sa[k].same_as(sb[k]) for k in sa):
                return False
        return True

    def __repr__(self):
        inner = ", ".join(f"{n}:{layer.kind}" for n, layer in self.layers)
        return f"Model([{inner}])"


def _layer_entry(name: str, layer: Layer, offset: int, arrays: list):
    entry = {"name": name, "kind": layer.kind, "config": layer.config(), "params": [], "sketches": {}}
    for pname, arr in layer.params().items():
        entry["params"].append({"name": pname, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        arrays.append(arr)
        offset += arr.size
    for sname, op in layer.sketches().items():
        d = op.descriptor()
        if op.dist is Dist.EXPLICIT:
            d = {"dist": "explicit", "rows": op.rows, "cols": op.cols, "offset": offset}
            arrays.append(op.matrix)
            offset += op.matrix.size
        entry["sketches"][sname] = d
    return entry, offset


def model_save(model: Model, path, dtype: str | None = None) -> None:
    dtype = dtype or model.dtype
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    path = os.fspath(path)
    arrays: list[np.ndarray] = []
    offset = 0
    layers = []
    for name, layer in model.layers:
        entry, offset = _layer_entry(name, layer, offset, arrays)
        layers.append(entry)
    width = _DTYPES[dtype].itemsize
    blob_name = os.path.basename(path) + ".bin"
    manifest = {
        "format_version": FORMAT_VERSION,
        "rng_algorithm": RNG_ALGORITHM,
        "dtype": dtype,
        "blob": blob_name,
        "blob_bytes": len(MAGIC) + 1 + offset * width,
        "layers": layers,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    with open(path + ".bin", "wb") as fh:
        fh.write(MAGIC + bytes([FORMAT_VERSION]))
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())


def read_manifest(path) -> dict:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict):
        raise ModelFormatError(f"{path}: manifest must be a JSON object")
    missing = {"format_version", "rng_algorithm", "dtype", "layers"} - manifest.keys()
    if missing:
        raise ModelFormatError(f"{path}: manifest missing fields {sorted(missing)}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format_version {manifest['format_version']!r}")
    if manifest["dtype"] not in _DTYPES:
        raise ModelFormatError(f"{path}: unknown dtype {manifest['dtype']!r}")
    if manifest["rng_algorithm"] != RNG_ALGORITHM:
        raise ModelFormatError(f"{path}: sketches were generated with {manifest['rng_algorithm']!r}, this build uses {RNG_ALGORITHM!r}")
    return manifest


def model_load(path) -> Model:
    path = os.fspath(path)
    manifest = read_manifest(path)
    dt = _DTYPES[manifest["dtype"]]
    blob_path = os.path.join(os.path.dirname(path), manifest.get("blob", os.path.basename(path) + ".bin"))
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ModelFormatError(f"{blob_path}: bad magic {blob[:4]!r}")
    if len(blob) < 5 or blob[4] != FORMAT_VERSION:
        raise ModelFormatError(f"{blob_path}: unsupported blob version")
    body = blob[5:]
    total = 0
    for entry in manifest["layers"]:
        for p in entry.get("params", []):
            total = max(total, p["offset"] + p["count"])
        for s in entry.get("sketches", {}).values():
            if s.get("dist") == "explicit":
                total = max(total, s["offset"] + s["rows"] * s["cols"])
    if len(body) != total * dt.itemsize or manifest.get("blob_bytes", len(blob)) != len(blob):
        raise ModelFormatError(
            f"{blob_path}: blob holds {len(body)} payload bytes, manifest describes {total * dt.itemsize}"
        )
    values = np.frombuffer(body, dtype=dt)

    def take(offset, count, shape):
        arr = values[offset : offset + count].astype(np.float64)
        if arr.size != int(np.prod(shape)):
            raise ModelFormatError("parameter count does not match its shape")
        return arr.reshape(shape)

    model = Model(dtype=manifest["dtype"])
    for entry in manifest["layers"]:
        try:
            params = {p["name"]: take(p["offset"], p["count"], tuple(p["shape"])) for p in entry["params"]}
            sketches = {}
            for sname, d in entry["sketches"].items():
                if d["dist"] == "explicit":
                    sketches[sname] = SketchOp.explicit(take(d["offset"], d["rows"] * d["cols"], (d["rows"], d["cols"])))
                else:
                    sketches[sname] = SketchOp.from_descriptor(d)
            layer = _build_layer(entry["kind"], entry["config"], params, sketches)
        except (KeyError, TypeError) as exc:
            raise ModelFormatError(f"layer {entry.get('name')!r}: malformed entry ({exc!r})") from exc
        model.add(entry["name"], layer)
    return model


def _sk_linear(cfg, params, sketches, d_in, d_out):
    terms = [
        SkTerm(
            s1=sketches[f"s1.{i}"],
            u1=params[f"u1.{i}"],
            s2=sketches[f"s2.{i}"],
            u2=params[f"u2.{i}"],
        )
        for i in range(cfg["num_terms"])
    ]
    return SkLinear(d_in, d_out, cfg["num_terms"], cfg["low_rank"], terms, params["bias"], cfg.get("seed"), cfg.get("dist", "gaussian"))


def _build_layer(kind, cfg, params, sketches) -> Layer:
    if kind == "DenseLinear":
        return DenseLinear(params["weight"], params["bias"])
    if kind == "SkLinear":
        return _sk_linear(cfg, params, sketches, cfg["d_in"], cfg["d_out"])
    if kind == "DenseConv2d":
        return DenseConv2d(params["weight"], params["bias"], cfg["stride"], cfg["padding"])
    if kind == "SkConv2d":
        kh, kw = cfg["kernel_h"], cfg["kernel_w"]
        inner = _sk_linear(cfg, params, sketches, cfg["c_in"] * kh * kw, cfg["c_out"])
        return SkConv2d(cfg["c_in"], cfg["c_out"], kh, kw, inner, cfg["stride"], cfg["padding"])
    if kind == "ExactMha":
        return ExactMha(cfg["embed_dim"], cfg["num_heads"], params["w_q"], params["w_k"], params["w_v"], params["w_o"])
    if kind == "RandMha":
        rf = [sketches[f"rf.{i}"] for i in range(cfg["num_heads"])]
        return RandMha(
            cfg["embed_dim"], cfg["num_heads"], cfg["num_features"], cfg["kernel"],
            params["w_q"], params["w_k"], params["w_v"], params["w_o"], rf, cfg["eps"], cfg.get("seed"),
        )
    if kind == "ReLU":
        return ReLU()
    raise ModelFormatError(f"unknown layer kind {kind!r}")
