"""Model container round-trips and damage detection."""

import json
import struct

import numpy as np
import pytest

from axdnn import luts, quant
from axdnn.model import Model, build_preset, init_params
from axdnn.modelio import (ModelFormatError, load_model, save_model,
                           save_quantized, spec_from_json, spec_to_json)


@pytest.fixture()
def small_model():
    spec = build_preset("ffnn", (1, 8, 8))
    return Model(spec, init_params(spec, seed=2))


def test_spec_json_round_trip():
    for preset, shape in [("lenet5", (1, 32, 32)), ("alexnet_mini", (1, 28, 28)),
                          ("ffnn", (3, 32, 32))]:
        spec = build_preset(preset, shape)
        assert spec_from_json(spec_to_json(spec)) == spec


def test_float_round_trip_is_bit_exact(tmp_path, small_model):
    path = tmp_path / "m.axm"
    save_model(small_model, path)
    back = load_model(path)
    assert isinstance(back, Model)
    assert back.spec == small_model.spec
    for name, arr in small_model.params.items():
        assert np.array_equal(back.params[name], arr)
        assert back.params[name].dtype == np.float32


def test_quantized_round_trip_preserves_inference(tmp_path, lenet5_qexact, mnist32):
    x = mnist32["test"].images[:16]
    lut = luts.generate("operand_trunc", 8, k=2)
    routed = quant.route_multipliers(
        lenet5_qexact, {n: lut for n in lenet5_qexact.spec.conv_layer_names})
    for tag, qm in (("exact", lenet5_qexact), ("routed", routed)):
        path = tmp_path / f"{tag}.axm"
        save_quantized(qm, path)
        back = load_model(path)
        assert type(back).__name__ == "QuantizedModel"
        assert back.qparams == qm.qparams
        assert {k: v.name for k, v in back.routing.items()} == \
               {k: v.name for k, v in qm.routing.items()}
        assert np.array_equal(quant.qforward(back, x), quant.qforward(qm, x))


def test_container_damage_is_detected(tmp_path, small_model):
    path = tmp_path / "m.axm"
    save_model(small_model, path)
    blob = path.read_bytes()

    cases = {
        "bad_magic": b"WRONG!!!" + blob[8:],
        "bad_version": blob[:8] + struct.pack("<I", 999) + blob[12:],
        "truncated_header": blob[:20],
        "truncated_payload": blob[:-10],
    }
    for name, damaged in cases.items():
        p = tmp_path / name
        p.write_bytes(damaged)
        with pytest.raises(ModelFormatError):
            load_model(p)


def test_missing_tensor_is_detected(tmp_path, small_model):
    path = tmp_path / "m.axm"
    save_model(small_model, path)
    blob = path.read_bytes()
    header_len = struct.unpack("<I", blob[12:16])[0]
    header = json.loads(blob[16:16 + header_len])
    header["tensors"] = [t for t in header["tensors"] if t["name"] != "dense1.w"]
    new_header = json.dumps(header, sort_keys=True).encode()
    damaged = (blob[:8] + struct.pack("<II", 1, len(new_header)) + new_header
               + blob[16 + header_len:])
    p = tmp_path / "missing.axm"
    p.write_bytes(damaged)
    with pytest.raises(ModelFormatError):
        load_model(p)


def test_spec_json_rejects_unknown_layer():
    with pytest.raises(ModelFormatError):
        spec_from_json({"name": "x", "input_shape": [1, 8, 8],
                        "layers": [{"type": "warp_drive"}]})


def test_not_a_container(tmp_path):
    p = tmp_path / "noise.axm"
    p.write_bytes(b"this is not a model file at all")
    with pytest.raises(ModelFormatError):
        load_model(p)
