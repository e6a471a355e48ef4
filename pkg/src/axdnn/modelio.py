"""Binary model container: magic, version, JSON header, raw tensor payload.

Layout: b"AXMODEL1" | version u32 LE | header_len u32 LE | header JSON utf-8
| payload. The header lists the layer stack and a tensor manifest with
offsets into the payload; tensors are stored as raw little-endian bytes, so
a save/load round trip is bit-exact. Quantized models reuse the same
container with integer tensors and an extra "quant" header section.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .model import (AvgPool, Conv2D, Dense, Flatten, Model, ModelSpec, ReLU)

MODEL_MAGIC = b"AXMODEL1"
MODEL_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "|u1": np.dtype("u1"),
           "|i1": np.dtype("i1"), "<i4": np.dtype("<i4"), "<u4": np.dtype("<u4"),
           "<i8": np.dtype("<i8")}


class ModelFormatError(ValueError):
    """Unreadable or inconsistent model container."""


def spec_to_json(spec: ModelSpec) -> dict:
    layers = []
    for layer in spec.layers:
        if isinstance(layer, Conv2D):
            layers.append({"type": "conv", "out_channels": layer.out_channels,
                           "kernel": layer.kernel, "stride": layer.stride,
                           "pad": layer.pad})
        elif isinstance(layer, AvgPool):
            layers.append({"type": "pool", "kernel": layer.kernel})
        elif isinstance(layer, Dense):
            layers.append({"type": "dense", "out_features": layer.out_features})
        elif isinstance(layer, ReLU):
            layers.append({"type": "relu"})
        elif isinstance(layer, Flatten):
            layers.append({"type": "flatten"})
        else:
            raise ModelFormatError(f"cannot serialize layer {layer!r}")
    return {"name": spec.name, "input_shape": list(spec.input_shape),
            "layers": layers}


def spec_from_json(obj: dict) -> ModelSpec:
    try:
        layers: list = []
        for entry in obj["layers"]:
            kind = entry["type"]
            if kind == "conv":
                layers.append(Conv2D(entry["out_channels"], entry["kernel"],
                                     entry.get("stride", 1), entry.get("pad", 0)))
            elif kind == "pool":
                layers.append(AvgPool(entry.get("kernel", 2)))
            elif kind == "dense":
                layers.append(Dense(entry["out_features"]))
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "flatten":
                layers.append(Flatten())
            else:
                raise ModelFormatError(f"unknown layer type {kind!r} in header")
        return ModelSpec(obj["name"], tuple(obj["input_shape"]), tuple(layers))
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed spec section in header: {exc}") from exc


def _write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    manifest = []
    payload = bytearray()
    for name, arr in tensors.items():
        dstr = arr.dtype.newbyteorder("<").str if arr.dtype.kind in "fiu" else None
        if dstr not in _DTYPES:
            raise ModelFormatError(f"tensor {name} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dstr]).tobytes()
        manifest.append({"name": name, "dtype": dstr, "shape": list(arr.shape),
                         "offset": len(payload), "nbytes": len(raw)})
        payload.extend(raw)
    header = dict(header, tensors=manifest)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def _read_container(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model container (bad magic "
                               f"{blob[:8]!r})")
    if len(blob) < 16:
        raise ModelFormatError(f"{path}: truncated container header")
    version, header_len = struct.unpack("<II", blob[8:16])
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported container version {version}")
    if len(blob) < 16 + header_len:
        raise ModelFormatError(f"{path}: truncated JSON header")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable JSON header: {exc}") from exc
    payload = blob[16 + header_len:]

    tensors: dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        try:
            name, dstr = entry["name"], entry["dtype"]
            shape = tuple(entry["shape"])
            offset, nbytes = entry["offset"], entry["nbytes"]
        except (KeyError, TypeError) as exc:
            raise ModelFormatError(f"{path}: malformed tensor manifest entry "
                                   f"{entry!r}") from exc
        if dstr not in _DTYPES:
            raise ModelFormatError(f"{path}: tensor {name} has unsupported dtype "
                                   f"{dstr}")
        dtype = _DTYPES[dstr]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise ModelFormatError(f"{path}: tensor {name} byte count {nbytes} does "
                                   f"not match shape {shape}")
        if offset < 0 or offset + nbytes > len(payload):
            raise ModelFormatError(f"{path}: tensor {name} extends past the end of "
                                   f"the payload (truncated file?)")
        arr = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                            offset=offset).reshape(shape)
        tensors[name] = arr.copy()
    return header, tensors


def save_model(model: Model, path: str | os.PathLike) -> None:
    header = {"spec": spec_to_json(model.spec)}
    tensors = {k: v.astype("<f4") for k, v in sorted(model.params.items())}
    _write_container(path, header, tensors)


def save_quantized(qmodel, path: str | os.PathLike) -> None:
    qp = qmodel.qparams
    header = {
        "spec": spec_to_json(qmodel.spec),
        "quant": {
            "qlevel": qp.qlevel,
            "input_scale": qp.input_scale,
            "act_scales": dict(qp.act_scales),
            "weight_scales": dict(qp.weight_scales),
            # LUT objects are stored once each: the routing section maps layer
            # name -> LUT name, and each table rides along as a "lut." tensor.
            "routing": {layer: lut.name for layer, lut in qmodel.routing.items()},
        },
    }
    tensors: dict[str, np.ndarray] = {}
    for lut in qmodel.routing.values():
        key = f"lut.{lut.name}"
        if key in tensors and not np.array_equal(tensors[key], lut.table):
            raise ModelFormatError(f"two different tables share the LUT name "
                                   f"{lut.name!r}; rename one before saving")
        tensors[key] = lut.table
    for name in qmodel.spec.mult_layer_names:
        tensors[f"{name}.mag"] = qmodel.mags[name]
        tensors[f"{name}.sign"] = qmodel.signs[name]
        tensors[f"{name}.bias"] = qmodel.biases[name]
    _write_container(path, header, tensors)


def load_model(path: str | os.PathLike):
    """Load a container; returns a Model, or a QuantizedModel when the file
    carries a quant section. No object is produced from a damaged file."""
    header, tensors = _read_container(path)
    if "spec" not in header:
        raise ModelFormatError(f"{path}: header lacks a spec section")
    spec = spec_from_json(header["spec"])

    if header.get("quant") is None:
        try:
            return Model(spec, {k: v.astype(np.float32) for k, v in tensors.items()})
        except ValueError as exc:
            raise ModelFormatError(f"{path}: {exc}") from exc

    from .luts import MultiplierLUT  # deferred: avoids cycles at import time
    from .quant import QuantParams, QuantizedModel  # deferred: quant imports this module

    q = header["quant"]
    try:
        qp = QuantParams(input_scale=float(q["input_scale"]),
                         act_scales=dict(q["act_scales"]),
                         weight_scales=dict(q["weight_scales"]),
                         qlevel=int(q["qlevel"]))
        routing_names = dict(q["routing"])
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: malformed quant section: {exc}") from exc
    routing = {}
    luts_by_name: dict[str, MultiplierLUT] = {}
    for layer, lut_name in routing_names.items():
        if lut_name not in luts_by_name:
            try:
                table = tensors[f"lut.{lut_name}"]
            except KeyError as exc:
                raise ModelFormatError(f"{path}: routing references LUT "
                                       f"{lut_name!r} but its table is not in "
                                       f"the container") from exc
            width = max(table.shape[0].bit_length() - 1, 2) // 2
            try:
                luts_by_name[lut_name] = MultiplierLUT(lut_name, width, table)
            except ValueError as exc:
                raise ModelFormatError(f"{path}: stored LUT {lut_name!r} is "
                                       f"invalid: {exc}") from exc
        routing[layer] = luts_by_name[lut_name]
    mags, signs, biases = {}, {}, {}
    for name in spec.mult_layer_names:
        try:
            mags[name] = tensors[f"{name}.mag"]
            signs[name] = tensors[f"{name}.sign"]
            biases[name] = tensors[f"{name}.bias"]
        except KeyError as exc:
            raise ModelFormatError(f"{path}: quantized tensor {exc} missing") from exc
    try:
        return QuantizedModel(spec, mags, signs, biases, qp, routing)
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
