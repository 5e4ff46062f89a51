import os
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from crisp.errors import BadMagicError, ChecksumError, ConfigError, ContainerError, ShapeError, TruncatedError, VersionError
from crisp.mimicry import FactorBank, LayerGroup
from crisp.recombinator import FactorizationConfig, GateConfig
from crisp.store import (
    MAGIC,
    apply_delta,
    csv_bytes,
    decode_container,
    delta_tensors,
    encode_container,
    load_bank,
    load_delta,
    read_container,
    read_csv,
    save_bank,
    save_delta,
    write_container,
    write_csv,
)


def sample_bank(rng):
    groups = []
    for gid, members in (("first/0", ["fc0"]), ("mid/0", ["fc1", "fc2"])):
        cfg = FactorizationConfig(4, 8, 8, 8)
        g = LayerGroup(gid, gid.split("/")[0], members, (8, 8), cfg)
        g.basis = rng.standard_normal(cfg.basis_shape).astype(np.float32)
        for n in members:
            g.mixers[n] = rng.standard_normal(cfg.mixer_shape).astype(np.float32)
            g.biases[n] = rng.standard_normal(8).astype(np.float32)
        groups.append(g)
    dense = {"head.weight": rng.standard_normal((3, 8)).astype(np.float32), "head.bias": np.zeros(3, np.float32)}
    return FactorBank(groups, GateConfig("POST", "gelu"), dense, {"layer_order": ["fc0", "fc1", "fc2", "head"]})


# -- container -----------------------------------------------------------------


def test_empty_container_layout():
    data = encode_container({})
    assert data[:4] == MAGIC and len(data) == 14
    assert struct.unpack("<HI", data[4:10]) == (1, 0)
    assert struct.unpack("<I", data[10:])[0] == zlib.crc32(data[:10])
    assert decode_container(data) == {}


def test_small_tensor_bytes():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    data = encode_container({"w": arr})
    body = data[10:-4]
    assert body[:3] == b"\x01\x00w" and body[3:5] == b"\x00\x02"
    assert struct.unpack("<2Q", body[5:21]) == (2, 3)
    assert body[21:] == arr.astype("<f4").tobytes()
    out = decode_container(data)
    assert out["w"].dtype == np.float32 and np.array_equal(out["w"], arr)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
def test_round_trip_bit_exact(arr):
    out = decode_container(encode_container({"t": arr, "é": arr[..., None]}))
    assert out["t"].tobytes() == arr.tobytes() and out["t"].shape == arr.shape
    assert out["é"].shape == arr.shape + (1,)


def test_every_flipped_byte_is_detected():
    data = encode_container({"a": np.ones((2, 2), np.float32), "b": np.zeros(3, np.float32)})
    for i in range(len(data)):
        bad = bytearray(data)
        bad[i] ^= 0x40
        with pytest.raises(ContainerError):
            decode_container(bytes(bad))


def test_payload_flip_raises_checksum_error():
    data = bytearray(encode_container({"a": np.ones((2, 2), np.float32)}))
    data[-6] ^= 1
    with pytest.raises(ChecksumError):
        decode_container(bytes(data))


def test_bad_magic_and_version():
    data = encode_container({})
    with pytest.raises(BadMagicError):
        decode_container(b"XRSP" + data[4:])
    with pytest.raises(VersionError):
        decode_container(data[:4] + struct.pack("<H", 2) + data[6:])


def test_truncation_detected():
    data = encode_container({"a": np.ones((4, 4), np.float32)})
    for cut in (6, 12, 20, len(data) - 1):
        with pytest.raises(TruncatedError):
            decode_container(data[:cut])


def test_non_finite_and_bad_dtype_rejected():
    with pytest.raises(ContainerError):
        encode_container({"a": np.array([np.nan], np.float32)})
    with pytest.raises(ContainerError):
        encode_container({"a": np.array(["x"])})


def test_float64_input_stored_as_float32():
    out = decode_container(encode_container({"a": np.array([0.1])}))
    assert out["a"].dtype == np.float32 and out["a"][0] == np.float32(0.1)


def test_atomic_write_file_mode(tmp_path):
    path = tmp_path / "sub" / "x.crsp"
    write_container(path, {"a": np.ones(2, np.float32)})
    assert oct(os.stat(path).st_mode & 0o777) == oct(0o644)
    assert [p.name for p in path.parent.iterdir()] == ["x.crsp"]
    assert np.array_equal(read_container(path)["a"], [1, 1])


# -- banks -----------------------------------------------------------------------


def test_bank_round_trip_bit_identical(rng, tmp_path):
    bank = sample_bank(rng)
    save_bank(tmp_path / "b.crsp", bank)
    back = load_bank(tmp_path / "b.crsp")
    assert back.gate == bank.gate and back.meta == bank.meta
    for g, h in zip(bank.groups, back.groups):
        assert (g.group_id, g.kind, g.members, g.cfg) == (h.group_id, h.kind, h.members, h.cfg)
        assert g.basis.tobytes() == h.basis.tobytes()
        assert all(g.mixers[n].tobytes() == h.mixers[n].tobytes() for n in g.members)
    for n, w in bank.weights().items():
        assert w.tobytes() == back.weights()[n].tobytes()
    save_bank(tmp_path / "c.crsp", back)
    assert (tmp_path / "b.crsp").read_bytes() == (tmp_path / "c.crsp").read_bytes()


def test_load_bank_expect_mismatch_names_group(rng, tmp_path):
    save_bank(tmp_path / "b.crsp", sample_bank(rng))
    with pytest.raises(ShapeError, match="mid/0"):
        load_bank(tmp_path / "b.crsp", expect={"mid/0": FactorizationConfig(8, 8, 8, 8)})


def test_load_bank_missing_tensor(rng, tmp_path):
    bank = sample_bank(rng)
    from crisp.store import bank_tensors

    t = bank_tensors(bank)
    del t["layers.fc1.mixer"]
    write_container(tmp_path / "b.crsp", t)
    with pytest.raises(ContainerError, match="fc1"):
        load_bank(tmp_path / "b.crsp")


# -- deltas ------------------------------------------------------------------------


def test_delta_apply_reproduces_adapted(rng, tmp_path):
    base = sample_bank(rng)
    adapted = base.copy()
    for g in adapted.groups:
        for n in g.members:
            g.mixers[n] += 1
    adapted.dense["head.weight"] *= 2
    save_delta(tmp_path / "d.crsp", adapted, base)
    delta = load_delta(tmp_path / "d.crsp")
    assert not any(k.endswith(".basis") for k in delta)
    assert "dense.head.weight" in delta and "dense.head.bias" not in delta
    assert not any(k.endswith(".bias") and k.startswith("layers") for k in delta)
    rebuilt = apply_delta(base, delta)
    for n, w in adapted.weights().items():
        assert w.tobytes() == rebuilt.weights()[n].tobytes()
    assert rebuilt.dense["head.weight"].tobytes() == adapted.dense["head.weight"].tobytes()


def test_delta_refuses_changed_basis(rng):
    base = sample_bank(rng)
    adapted = base.copy()
    adapted.groups[0].basis[0, 0] += 1
    with pytest.raises(ConfigError):
        delta_tensors(adapted, base)


def test_apply_delta_validates(rng):
    base = sample_bank(rng)
    with pytest.raises(ConfigError):
        apply_delta(base, {"layers.nope.mixer": np.zeros((4, 8), np.float32)})
    with pytest.raises(ShapeError):
        apply_delta(base, {"layers.fc0.mixer": np.zeros((3, 8), np.float32)})


# -- csv ---------------------------------------------------------------------------


def test_csv_rfc4180(tmp_path):
    rows = [{"a": 0.1, "b": "x,y"}, {"a": np.float32(2.5), "b": 'say "hi"'}, {"a": np.int64(3), "b": ""}]
    data = csv_bytes(rows, ["a", "b"])
    assert data == b'a,b\r\n0.1,"x,y"\r\n2.5,"say ""hi"""\r\n3,\r\n'
    write_csv(tmp_path / "m.csv", rows, ["a", "b"])
    assert read_csv(tmp_path / "m.csv")[1] == {"a": "2.5", "b": 'say "hi"'}


def test_csv_floats_round_trip():
    vals = [1 / 3, 1e-17, 123456789.125]
    data = csv_bytes([{"v": v} for v in vals], ["v"]).decode()
    assert [float(x) for x in data.split("\r\n")[1:-1]] == vals


def test_csv_rejects_unknown_field():
    with pytest.raises(ValueError):
        csv_bytes([{"a": 1, "zz": 2}], ["a"])
