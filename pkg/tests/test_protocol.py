import ast
import inspect
import struct
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from ibunlearn import pipeline, protocol as P, unlearn as U, vib
from ibunlearn.data import Dataset
from ibunlearn.masking import WITH, WITHOUT, MaskSpec
from ibunlearn.numerics import ShapeError, seeded_rng


@pytest.fixture()
def model():
    return vib.build_model(6, 3, 2, 1e-2, seeded_rng(0), compressor_hidden=(5,), approximator_hidden=(4,))


@pytest.fixture()
def erased():
    rng = np.random.default_rng(1)
    return rng.uniform(size=(7, 6)), rng.integers(0, 3, 7)


def _request(model, erased, sr=0.5, strategy=WITH):
    ckpt = P.compressor_checkpoint(model, seed=0)
    return P.prepare_request(ckpt, erased[0], erased[1], MaskSpec(6, sr, strategy), seeded_rng(2))


def test_fnv1a64_reference_values():
    assert P.fnv1a64(b"") == 0xCBF29CE484222325
    assert P.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert P.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_checkpoint_export_import_export_byte_identical(model, tmp_path):
    P.export_compressor(model, tmp_path / "a.bldu", seed=3)
    ckpt = P.load_checkpoint(tmp_path / "a.bldu")
    (tmp_path / "b.bldu").write_bytes(P.checkpoint_bytes(ckpt))
    assert (tmp_path / "a.bldu").read_bytes() == (tmp_path / "b.bldu").read_bytes()
    assert ckpt.seed == 3 and ckpt.latent_dim == 2 and ckpt.n_features == 6


def test_checkpoint_has_no_approximator(model, tmp_path):
    P.export_compressor(model, tmp_path / "c.bldu")
    _, header, arrays = P.decode_container((tmp_path / "c.bldu").read_bytes())
    assert arrays and all(name.startswith("compressor") for name in arrays)
    assert header["kind"] == "1" and header["latent_dim"] == "2"


def test_checkpoint_preamble_layout(model):
    blob = P.checkpoint_bytes(P.compressor_checkpoint(model))
    assert blob[:4] == b"BLDU"
    version, kind, header_len = struct.unpack("<HBI", blob[4:11])
    assert (version, kind) == (1, 1)
    assert blob[11:11 + header_len].decode().startswith("version=1\nkind=1\n")


def test_checkpoint_values_at_f32(model):
    ckpt = P.compressor_checkpoint(model)
    for name, value in ckpt.params.items():
        assert np.array_equal(value, model.params[name].astype(np.float32).astype(np.float64))


def test_checkpoint_hash_stable(model):
    a = P.compressor_checkpoint(model).hash
    b = P.compressor_checkpoint(model).hash
    assert a == b and len(a) == 16
    other = vib.build_model(6, 3, 2, 1e-2, seeded_rng(1), compressor_hidden=(5,), approximator_hidden=(4,))
    assert P.compressor_checkpoint(other).hash != a


def test_wrong_magic_is_format_error(model, tmp_path):
    blob = bytearray(P.checkpoint_bytes(P.compressor_checkpoint(model)))
    blob[:4] = b"XXXX"
    (tmp_path / "bad").write_bytes(bytes(blob))
    with pytest.raises(P.ProtocolFormatError) as err:
        P.load_checkpoint(tmp_path / "bad")
    assert err.value.offset == 0


def test_truncation_reports_offset(model):
    blob = P.checkpoint_bytes(P.compressor_checkpoint(model))
    with pytest.raises(P.ProtocolFormatError) as err:
        P.decode_container(blob[:-3])
    assert 0 < err.value.offset < len(blob)


def test_bad_version_and_kind(model):
    blob = bytearray(P.checkpoint_bytes(P.compressor_checkpoint(model)))
    v = bytearray(blob)
    v[4:6] = struct.pack("<H", 9)
    with pytest.raises(P.ProtocolFormatError) as err:
        P.decode_container(bytes(v))
    assert err.value.offset == 4
    k = bytearray(blob)
    k[6] = 7
    with pytest.raises(P.ProtocolFormatError) as err:
        P.decode_container(bytes(k))
    assert err.value.offset == 6


def test_kind_mismatch_on_load(model, erased, tmp_path):
    P.save_request(_request(model, erased), tmp_path / "r")
    with pytest.raises(P.ProtocolFormatError):
        P.load_checkpoint(tmp_path / "r")


def test_full_model_round_trip(model, tmp_path):
    P.save_model(model, tmp_path / "m")
    back = P.load_model(tmp_path / "m")
    P.save_model(back, tmp_path / "m2")
    assert (tmp_path / "m").read_bytes() == (tmp_path / "m2").read_bytes()
    assert back.beta == model.beta and back.approximator.widths == model.approximator.widths


def test_full_rate_without_replacement_request_is_plain_encoding(model, erased):
    ckpt = P.compressor_checkpoint(model)
    req = P.prepare_request(ckpt, erased[0], erased[1], MaskSpec(6, 1.0, WITHOUT), seeded_rng(2))
    assert np.array_equal(req.z_e, ckpt.encode(erased[0]).mean)


def test_request_has_m_rows_and_metadata(model, erased):
    req = _request(model, erased)
    assert req.z_e.shape == (7, 2) and req.y_e.tolist() == erased[1].tolist()
    assert req.created_with == P.compressor_checkpoint(model).hash
    assert req.dp.k == 3 and req.beta_used == pytest.approx(1e-2)


def test_request_round_trip_and_deterministic_bytes(model, erased, tmp_path):
    req = _request(model, erased)
    assert P.request_bytes(req) == P.request_bytes(_request(model, erased))
    P.save_request(req, tmp_path / "r")
    back = P.load_request(tmp_path / "r")
    assert np.array_equal(back.z_e, req.z_e.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.y_e, req.y_e) and back.dp == req.dp
    P.save_request(back, tmp_path / "r2")
    assert (tmp_path / "r").read_bytes() == (tmp_path / "r2").read_bytes()


def test_sampled_mode_differs_from_mean(model, erased):
    ckpt = P.compressor_checkpoint(model)
    spec = MaskSpec(6, 0.5)
    mean = P.prepare_request(ckpt, *erased, spec, seeded_rng(2))
    sampled = P.prepare_request(ckpt, *erased, spec, seeded_rng(2), mode="sampled")
    assert sampled.mode == "sampled" and not np.array_equal(mean.z_e, sampled.z_e)


def test_prepare_request_dimension_errors(model, erased):
    ckpt = P.compressor_checkpoint(model)
    with pytest.raises(ShapeError):
        P.prepare_request(ckpt, erased[0][:, :5], erased[1], MaskSpec(6, 0.5), seeded_rng(0))
    with pytest.raises(ShapeError):
        P.prepare_request(ckpt, erased[0][:, :5], erased[1], MaskSpec(5, 0.5), seeded_rng(0))
    with pytest.raises(ValueError):
        P.prepare_request(ckpt, *erased, MaskSpec(6, 0.5), seeded_rng(0), mode="median")


def test_validate_accepts_consistent_request(model, erased):
    verdict = P.validate_for_model(_request(model, erased), model)
    assert verdict and verdict.reason == ""


def test_validate_rejects_tampered_epsilon(model, erased):
    req = _request(model, erased)
    bad = replace(req, dp=replace(req.dp, epsilon=req.dp.epsilon + 0.1))
    assert P.validate_for_model(bad, model) == P.Verdict(False, "dp metadata inconsistent")


def test_validate_rejects_tampered_k(model, erased):
    req = _request(model, erased)
    assert not P.validate_for_model(replace(req, dp=replace(req.dp, k=req.dp.k + 1)), model)


def test_validate_rejects_stale_hash(model, erased):
    req = _request(model, erased)
    retrained = vib.build_model(6, 3, 2, 1e-2, seeded_rng(9), compressor_hidden=(5,), approximator_hidden=(4,))
    assert P.validate_for_model(req, retrained) == P.Verdict(False, "checkpoint mismatch")


def test_validate_rejects_labels_and_dims(model, erased):
    req = _request(model, erased)
    h = req.created_with
    assert P.validate_request(req, h, 3, 3).reason == "latent dim mismatch"
    assert P.validate_request(replace(req, y_e=req.y_e + 5), h, 2, 3).reason == "label out of range"
    nan = req.z_e.copy()
    nan[0, 0] = np.nan
    assert P.validate_request(replace(req, z_e=nan), h, 2, 3).reason == "non-finite codes"


def test_atomic_write_leaves_no_temp_files(tmp_path):
    P.atomic_write(tmp_path / "x", b"abc")
    assert (tmp_path / "x").read_bytes() == b"abc"
    assert [p.name for p in tmp_path.iterdir()] == ["x"]


# Server entry points take codes, never raw erased inputs.

SERVER_ENTRY_POINTS = [(U.unlearn, "forget", U.ForgetBatch), (pipeline.server_unlearn, "request", P.UnlearningRequest)]


@pytest.mark.parametrize("fn,param,kind", SERVER_ENTRY_POINTS)
def test_server_entry_points_are_typed_to_codes(fn, param, kind):
    ann = inspect.signature(fn).parameters[param].annotation
    assert ann in (kind, kind.__name__)
    assert not any(f in ("x_e", "inputs") for f in kind.__dataclass_fields__)


def test_server_entry_points_reject_raw_inputs(model, erased):
    raw = Dataset(erased[0], erased[1], 3)
    aux = Dataset(erased[0], erased[1], 3)
    with pytest.raises(TypeError):
        U.unlearn(model, raw, aux, U.UnlearnConfig(epochs=1))
    with pytest.raises(TypeError):
        pipeline.server_unlearn(pipeline.load_config(None), model, raw, aux)


def test_unlearn_module_cannot_reach_masking_or_client_code():
    tree = ast.parse(Path(inspect.getsourcefile(U)).read_text())
    imported = {node.module for node in ast.walk(tree) if isinstance(node, ast.ImportFrom)}
    assert not imported & {"masking", "protocol", "pipeline"}
