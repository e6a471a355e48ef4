"""Post-training 8-bit quantization and integer inference through multiplier LUTs.

Weights are sign-magnitude (u8 magnitude, separate +-1 sign), activations
unsigned u8, biases i32 at the accumulator scale s_in * s_w. Every product
inside a routed layer is fetched from the layer's multiplier LUT, so running
with a non-exact LUT reproduces that circuit's arithmetic bit-for-bit.

Scales are symmetric per layer: s = max / (2**qlevel - 1). The requantize
step back to u8, clamp(round(acc * s_in * s_w / s_out), 0, 255) with ties
away from zero, doubles as the ReLU, which is why each multiplying layer
except the last must be directly followed by one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import ops
from .luts import MultiplierLUT, generate
from .model import Conv2D, Dense, Model, ModelSpec, ReLU, param_shapes

SCALE_FLOOR = 1e-8


class QuantError(ValueError):
    """Model structure or parameters unsuitable for quantization."""


@dataclass(frozen=True)
class QuantParams:
    """Per-layer symmetric scales. act_scales covers every multiplying layer
    except the final one (whose output stays at accumulator scale)."""

    input_scale: float
    act_scales: dict[str, float]
    weight_scales: dict[str, float]
    qlevel: int = 8

    def __post_init__(self):
        if not 2 <= self.qlevel <= 8:
            raise QuantError(f"qlevel must be in [2, 8], got {self.qlevel}")
        for label, scales in (("act", self.act_scales), ("weight", self.weight_scales)):
            for name, s in scales.items():
                if not s > 0:
                    raise QuantError(f"{label} scale for {name} must be positive, "
                                     f"got {s}")


def _check_structure(spec: ModelSpec) -> None:
    names = spec.layer_names
    mult_names = spec.mult_layer_names
    if not mult_names:
        raise QuantError(f"{spec.name}: no multiplying layers to quantize")
    if not isinstance(spec.layers[-1], (Conv2D, Dense)):
        raise QuantError(f"{spec.name}: last layer must be a conv or dense layer "
                         f"producing the logits")
    for i, (name, layer) in enumerate(zip(names, spec.layers[:-1])):
        if isinstance(layer, (Conv2D, Dense)) and not isinstance(spec.layers[i + 1], ReLU):
            raise QuantError(f"{spec.name}: layer {name} must be directly followed "
                             f"by ReLU; the u8 requantize clamp realizes it")


def calibrate(model: Model, images: np.ndarray, qlevel: int = 8,
              batch_size: int = 128) -> QuantParams:
    """Derive scales from weight extrema and activation maxima on a calibration set."""
    _check_structure(model.spec)
    if images.ndim != 4 or images.shape[0] == 0:
        raise QuantError(f"calibration set must be a non-empty (N, C, H, W) array, "
                         f"got shape {images.shape}")
    qmax = (1 << qlevel) - 1
    spec = model.spec
    mult_names = spec.mult_layer_names
    maxima = {n: 0.0 for n in mult_names[:-1]}

    for start in range(0, images.shape[0], batch_size):
        act = images[start:start + batch_size]
        last_mult = None
        for name, layer in zip(spec.layer_names, spec.layers):
            if isinstance(layer, Conv2D):
                w, b = model.params[f"{name}.w"], model.params[f"{name}.b"]
                act, _ = ops.conv2d_forward(act, w, b, layer.pad)
                last_mult = name
            elif isinstance(layer, Dense):
                act = ops.dense_forward(act, model.params[f"{name}.w"],
                                        model.params[f"{name}.b"])
                last_mult = name
            elif isinstance(layer, ReLU):
                act = ops.relu_forward(act)
                if last_mult in maxima:
                    maxima[last_mult] = max(maxima[last_mult], float(act.max()))
            elif hasattr(layer, "kernel"):
                act = ops.avgpool2d_forward(act, layer.kernel)
            else:
                act = act.reshape(act.shape[0], -1)

    act_scales = {}
    for name, m in maxima.items():
        if m <= 0.0:
            warnings.warn(f"{name}: activations never positive on the calibration "
                          f"set; flooring its scale")
            m = SCALE_FLOOR * qmax
        act_scales[name] = m / qmax

    weight_scales = {}
    for name in mult_names:
        m = float(np.abs(model.params[f"{name}.w"]).max())
        if m <= 0.0:
            warnings.warn(f"{name}: all-zero weights; flooring its scale")
            m = SCALE_FLOOR * qmax
        weight_scales[name] = m / qmax

    return QuantParams(input_scale=1.0 / qmax, act_scales=act_scales,
                       weight_scales=weight_scales, qlevel=qlevel)


def quantize(model: Model, qparams: QuantParams) -> "QuantizedModel":
    """Sign-magnitude weights and i32 biases; all conv layers routed exact."""
    _check_structure(model.spec)
    spec = model.spec
    qmax = (1 << qparams.qlevel) - 1
    mags, signs, biases = {}, {}, {}
    s_in = qparams.input_scale
    for name in spec.mult_layer_names:
        if name not in qparams.weight_scales:
            raise QuantError(f"qparams lack a weight scale for {name}")
        s_w = qparams.weight_scales[name]
        w = model.params[f"{name}.w"]
        b = model.params[f"{name}.b"]
        mag = np.clip(np.floor(np.abs(w) / s_w + 0.5), 0, qmax)
        mags[name] = mag.astype(np.uint8)
        signs[name] = np.where(w < 0, -1, 1).astype(np.int8)
        biases[name] = np.floor(np.abs(b) / (s_in * s_w) + 0.5).astype(np.int32) \
            * np.where(b < 0, -1, 1).astype(np.int32)
        if name in qparams.act_scales:
            s_in = qparams.act_scales[name]
    exact = generate("exact", qparams.qlevel)
    routing = {name: exact for name in spec.conv_layer_names}
    return QuantizedModel(spec, mags, signs, biases, qparams, routing)


def route_multipliers(qmodel: "QuantizedModel",
                      assignment: dict[str, MultiplierLUT]) -> "QuantizedModel":
    """New model with the given layers re-routed; weights are shared, not copied."""
    routing = dict(qmodel.routing)
    for name, lut in assignment.items():
        if name not in qmodel.spec.mult_layer_names:
            raise QuantError(f"cannot route {name}: not a multiplying layer of "
                             f"{qmodel.spec.name}")
        if lut.bit_width != qmodel.qparams.qlevel:
            raise QuantError(f"LUT {lut.name} is {lut.bit_width}-bit but the model "
                             f"is quantized to {qmodel.qparams.qlevel} bits")
        routing[name] = lut
    return QuantizedModel(qmodel.spec, qmodel.mags, qmodel.signs, qmodel.biases,
                          qmodel.qparams, routing)


def _requantize(acc: np.ndarray, factor: float, qmax: int) -> np.ndarray:
    # round half away from zero; negatives die on the clamp (that is the ReLU)
    return np.clip(np.floor(acc * factor + 0.5), 0, qmax).astype(np.uint8)


def _avgpool_int(act: np.ndarray, kernel: int) -> np.ndarray:
    n, c, h, w = act.shape
    ho, wo = h // kernel, w // kernel
    window = kernel * kernel
    sums = act[:, :, :ho * kernel, :wo * kernel].astype(np.int32)
    sums = sums.reshape(n, c, ho, kernel, wo, kernel).sum(axis=(3, 5))
    return ((sums + window // 2) // window).astype(np.uint8)  # ties away from zero


_ROW_BLOCK = 16384


def _lut_matmul(cols: np.ndarray, mag2d: np.ndarray, sign2d: np.ndarray,
                lut: MultiplierLUT) -> np.ndarray:
    """(P, K) u8 activations x (OC, K) sign-magnitude weights -> (P, OC) i64.

    Every elementary product is a gather from lut.table; signs fold in as a
    positive-column sum minus a negative-column sum.
    """
    p, k = cols.shape
    oc = mag2d.shape[0]
    w = lut.bit_width
    base = mag2d.astype(np.int32) << w
    pos_idx = [np.flatnonzero(sign2d[o] > 0) for o in range(oc)]
    neg_idx = [np.flatnonzero(sign2d[o] < 0) for o in range(oc)]
    out = np.empty((p, oc), dtype=np.int64)
    for start in range(0, p, _ROW_BLOCK):
        block = cols[start:start + _ROW_BLOCK].astype(np.int32)
        for o in range(oc):
            prods = lut.table[block + base[o]]
            out[start:start + _ROW_BLOCK, o] = (
                prods[:, pos_idx[o]].sum(axis=1, dtype=np.int64)
                - prods[:, neg_idx[o]].sum(axis=1, dtype=np.int64))
    return out


def _im2col_u8(x: np.ndarray, kernel: int, pad: int) -> np.ndarray:
    # zero padding is exact here: u8 level 0 is the real value 0.0
    return ops.im2col(x, kernel, pad)


class QuantizedModel:
    """Integer model: u8 activations, sign-magnitude u8 weights, i64 accumulators."""

    def __init__(self, spec: ModelSpec, mags: dict, signs: dict, biases: dict,
                 qparams: QuantParams, routing: dict[str, MultiplierLUT]):
        _check_structure(spec)
        shapes = param_shapes(spec)
        mult_names = set(spec.mult_layer_names)
        for label, tensors, dtype in (("magnitude", mags, np.uint8),
                                      ("sign", signs, np.int8),
                                      ("bias", biases, np.int32)):
            if set(tensors) != mult_names:
                raise QuantError(f"{label} tensors must cover exactly the "
                                 f"multiplying layers {sorted(mult_names)}")
            for name, arr in tensors.items():
                key = f"{name}.w" if label != "bias" else f"{name}.b"
                if arr.dtype != dtype or tuple(arr.shape) != shapes[key]:
                    raise QuantError(f"{label} tensor for {name}: expected "
                                     f"{dtype} {shapes[key]}, got {arr.dtype} "
                                     f"{arr.shape}")
        for name, arr in signs.items():
            if not np.isin(arr, (-1, 1)).all():
                raise QuantError(f"sign tensor for {name} has entries outside "
                                 "{-1, +1}")
        qmax = (1 << qparams.qlevel) - 1
        if any(int(m.max(initial=0)) > qmax for m in mags.values()):
            raise QuantError(f"magnitude exceeds {qmax} for qlevel {qparams.qlevel}")
        for name in spec.mult_layer_names[:-1]:
            if name not in qparams.act_scales:
                raise QuantError(f"qparams lack an activation scale for {name}")
        for name in spec.conv_layer_names:
            if name not in routing:
                raise QuantError(f"conv layer {name} has no multiplier routed")
        for name, lut in routing.items():
            if name not in mult_names:
                raise QuantError(f"routing entry {name} is not a multiplying layer")
            if lut.bit_width != qparams.qlevel:
                raise QuantError(f"LUT {lut.name} bit width {lut.bit_width} != "
                                 f"qlevel {qparams.qlevel}")
            # accumulators cannot wrap: worst case #MACs * max product << 2**63
            k = int(np.prod(shapes[f"{name}.w"][1:], dtype=np.int64))
            assert k * (qmax * qmax) + (1 << 31) < (1 << 62)
        self.spec = spec
        self.mags = mags
        self.signs = signs
        self.biases = biases
        self.qparams = qparams
        self.routing = dict(routing)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.spec.input_shape)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return qforward(self, x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(qforward(self, x), axis=1)


def qforward(qmodel: QuantizedModel, x: np.ndarray,
             batch_size: int = 128) -> np.ndarray:
    """Integer forward pass; takes floats in [0, 1], returns dequantized logits."""
    spec = qmodel.spec
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise QuantError(f"expected input of shape (N, "
                         f"{', '.join(map(str, spec.input_shape))}), got {x.shape}")
    if x.shape[0] == 0:
        raise QuantError("cannot run inference on an empty batch")
    lo, hi = float(x.min()), float(x.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise QuantError(f"input values must lie in [0, 1], got [{lo}, {hi}]")
    outs = [_qforward_batch(qmodel, x[s:s + batch_size])
            for s in range(0, x.shape[0], batch_size)]
    return np.concatenate(outs, axis=0)


def _qforward_batch(qmodel: QuantizedModel, x: np.ndarray) -> np.ndarray:
    spec = qmodel.spec
    qp = qmodel.qparams
    qmax = (1 << qp.qlevel) - 1
    act = np.clip(np.floor(x * qmax + 0.5), 0, qmax).astype(np.uint8)
    s_in = qp.input_scale
    n = x.shape[0]
    last = len(spec.layers) - 1

    for i, (name, layer) in enumerate(zip(spec.layer_names, spec.layers)):
        if isinstance(layer, Conv2D):
            mag = qmodel.mags[name].reshape(layer.out_channels, -1)
            sign = qmodel.signs[name].reshape(layer.out_channels, -1)
            cols = _im2col_u8(act, layer.kernel, layer.pad)
            acc = _lut_matmul(cols, mag, sign, qmodel.routing[name])
            acc += qmodel.biases[name].astype(np.int64)
            ho = act.shape[2] + 2 * layer.pad - layer.kernel + 1
            wo = act.shape[3] + 2 * layer.pad - layer.kernel + 1
            acc = acc.reshape(n, ho, wo, layer.out_channels).transpose(0, 3, 1, 2)
            s_w = qp.weight_scales[name]
            if i == last:
                return (acc * (s_in * s_w)).reshape(n, -1)
            act = _requantize(acc, s_in * s_w / qp.act_scales[name], qmax)
            s_in = qp.act_scales[name]
        elif isinstance(layer, Dense):
            mag = qmodel.mags[name]
            sign = qmodel.signs[name]
            if name in qmodel.routing:
                acc = _lut_matmul(act, mag, sign, qmodel.routing[name])
            else:
                w_signed = mag.astype(np.int64) * sign.astype(np.int64)
                acc = act.astype(np.int64) @ w_signed.T
            acc += qmodel.biases[name].astype(np.int64)
            s_w = qp.weight_scales[name]
            if i == last:
                return acc * (s_in * s_w)
            act = _requantize(acc, s_in * s_w / qp.act_scales[name], qmax)
            s_in = qp.act_scales[name]
        elif isinstance(layer, ReLU):
            pass  # folded into the requantize clamp
        elif hasattr(layer, "kernel"):
            act = _avgpool_int(act, layer.kernel)
        else:
            act = act.reshape(n, -1)
    raise QuantError(f"{spec.name}: forward pass fell through without producing "
                     f"logits")
