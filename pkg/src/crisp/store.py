"""Bit-exact persistence: the CRSP tensor container, factor-bank checkpoints and CSV metrics.

Container layout (all integers little-endian)::

    b"CRSP"  u16 version  u32 count
    count x [u16 name_len, name (UTF-8), u8 dtype, u8 ndim, ndim x u64 dim, payload]
    u32 CRC32 of every preceding byte

dtype 0 is float32; dtype 1 is uint8, used only for the JSON metadata
record of a bank checkpoint.  Payloads are row-major.
"""

import csv
import io
import json
import math
import os
import struct
import tempfile
import zlib

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    ContainerError,
    ShapeError,
    TruncatedError,
    VersionError,
)
from .mimicry import FactorBank, LayerGroup
from .recombinator import FactorizationConfig, GateConfig

MAGIC = b"CRSP"
VERSION = 1
META_KEY = "__meta__"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1}


# ---------------------------------------------------------------------------
# atomic file output


def atomic_write(path, data):
    """Write ``data`` to ``path`` via a sibling temp file so readers never see a partial file."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# container


def _as_storable(name, arr):
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        return np.asarray(arr, order="C")
    if arr.dtype.kind not in "fiu":
        raise ContainerError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    # asarray, not ascontiguousarray: the latter promotes 0-d arrays to 1-d
    out = np.asarray(arr, dtype="<f4", order="C")
    if not np.all(np.isfinite(out)):
        raise ContainerError(f"tensor {name!r} holds non-finite values")
    return out


def encode_container(tensors):
    """Serialise ``{name: array}`` in insertion order."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerError(f"tensor name too long: {name[:40]!r}...")
        arr = _as_storable(name, arr)
        if arr.ndim > 0xFF:
            raise ContainerError(f"tensor {name!r} has too many dimensions")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _CODES[arr.dtype.newbyteorder("<")], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_container(data):
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a CRSP container (bad magic)")
    if len(data) < 14:
        raise TruncatedError("container shorter than its fixed header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    version, count = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise VersionError(f"container version {version} is not supported (expected {VERSION})")
    intact = zlib.crc32(body) == crc
    try:
        out = _parse_records(body, count)
    except TruncatedError:
        raise
    except (ContainerError, UnicodeDecodeError) as exc:
        # a structural error in a file whose checksum fails is corruption, not a malformed writer
        if not intact:
            raise ChecksumError("container CRC32 mismatch (file is corrupt)") from exc
        raise ContainerError(str(exc)) from None
    if not intact:
        raise ChecksumError("container CRC32 mismatch (file is corrupt)")
    return out


def _parse_records(body, count):
    pos = 10
    out = {}

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise TruncatedError(f"container truncated at byte {pos} (needed {n} more)")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise ContainerError(f"tensor {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _DTYPES[code]
        arr = np.frombuffer(take(math.prod(shape) * dt.itemsize), dtype=dt).reshape(shape).copy()
        if name in out:
            raise ContainerError(f"duplicate tensor name {name!r}")
        out[name] = arr.astype(np.float32) if code == 0 else arr
    if pos != len(body):
        raise ContainerError(f"{len(body) - pos} unexpected bytes after the last tensor")
    return out


def write_container(path, tensors):
    atomic_write(path, encode_container(tensors))


def read_container(path):
    with open(path, "rb") as fh:
        return decode_container(fh.read())


# ---------------------------------------------------------------------------
# factor banks


def bank_tensors(bank):
    """Flatten a bank into container records, metadata first."""
    meta = {
        "gate": {"placement": bank.gate.placement, "activation": bank.gate.activation},
        "groups": [
            {"id": g.group_id, "kind": g.kind, "members": list(g.members),
             "r": g.cfg.r, "s": g.cfg.s, "d_in": g.cfg.d_in, "d_out": g.cfg.d_out}
            for g in bank.groups
        ],
        "dense": list(bank.dense),
        "meta": bank.meta,
    }
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = {META_KEY: np.frombuffer(raw, dtype=np.uint8)}
    for g in bank.groups:
        out[f"groups.{g.group_id}.basis"] = g.basis
        for n in g.members:
            out[f"layers.{n}.mixer"] = g.mixers[n]
            out[f"layers.{n}.bias"] = g.biases[n]
    for k, v in bank.dense.items():
        out[f"dense.{k}"] = v
    return out


def _need(tensors, key):
    if key not in tensors:
        raise ContainerError(f"checkpoint metadata names tensor {key!r} but it is missing")
    return tensors[key]


def bank_from_tensors(tensors, expect=None):
    """Rebuild a bank; ``expect`` optionally maps group id to the required FactorizationConfig."""
    meta = json.loads(bytes(_need(tensors, META_KEY)).decode("utf-8"))
    gate = GateConfig(**meta["gate"])
    groups = []
    for gm in meta["groups"]:
        cfg = FactorizationConfig(gm["r"], gm["s"], gm["d_in"], gm["d_out"])
        if expect is not None and gm["id"] in expect and expect[gm["id"]] != cfg:
            raise ShapeError(f"group {gm['id']}: stored config {cfg} does not match expected {expect[gm['id']]}")
        g = LayerGroup(gm["id"], gm["kind"], list(gm["members"]), (gm["d_out"], gm["d_in"]), cfg)
        g.basis = _need(tensors, f"groups.{g.group_id}.basis")
        if g.basis.shape != cfg.basis_shape:
            raise ShapeError(f"group {g.group_id}: basis shape {g.basis.shape} != {cfg.basis_shape}")
        for n in g.members:
            g.mixers[n] = _need(tensors, f"layers.{n}.mixer")
            g.biases[n] = _need(tensors, f"layers.{n}.bias")
        groups.append(g)
    dense = {k: _need(tensors, f"dense.{k}") for k in meta["dense"]}
    bank = FactorBank(groups, gate, dense, meta["meta"])
    bank.validate()
    return bank


def save_bank(path, bank):
    bank.validate()
    write_container(path, bank_tensors(bank))


def load_bank(path, expect=None):
    return bank_from_tensors(read_container(path), expect)


# ---------------------------------------------------------------------------
# adapter deltas


def delta_tensors(adapted, base):
    """Every mixer of ``adapted`` plus any bias or dense tensor that differs from ``base``.

    Bases are never included: adaptation must not touch them, and a changed
    basis raises instead of being silently dropped.
    """
    out = {}
    for g in adapted.groups:
        bg = base.group_of(g.members[0])
        if g.basis.tobytes() != bg.basis.tobytes():
            raise ConfigError(f"group {g.group_id}: basis differs from the base bank; not a mixer delta")
        for n in g.members:
            out[f"layers.{n}.mixer"] = g.mixers[n]
            if g.biases[n].tobytes() != bg.biases[n].tobytes():
                out[f"layers.{n}.bias"] = g.biases[n]
    for k, v in adapted.dense.items():
        if k not in base.dense or v.tobytes() != base.dense[k].tobytes():
            out[f"dense.{k}"] = v
    return out


def apply_delta(base, delta):
    """New bank equal to ``base`` with the delta's tensors substituted."""
    out = base.copy()
    layers = {n: g for g in out.groups for n in g.members}
    for key, v in delta.items():
        kind, _, rest = key.partition(".")
        if kind == "dense":
            if rest not in out.dense:
                raise ConfigError(f"delta names unknown dense tensor {rest!r}")
            out.dense[rest] = v.copy()
            continue
        name, _, field = rest.rpartition(".")
        if kind != "layers" or name not in layers or field not in ("mixer", "bias"):
            raise ConfigError(f"delta tensor {key!r} does not match the base bank")
        target = layers[name].mixers if field == "mixer" else layers[name].biases
        if target[name].shape != v.shape:
            raise ShapeError(f"delta {key!r} shape {v.shape} != base {target[name].shape}")
        target[name] = v.copy()
    return out


def save_delta(path, adapted, base):
    write_container(path, delta_tensors(adapted, base))


def load_delta(path):
    return read_container(path)


# ---------------------------------------------------------------------------
# metrics


def format_value(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def csv_bytes(rows, fieldnames):
    """RFC 4180 CSV (CRLF line ends, header row); floats use shortest round-trip repr."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\r\n")
    w.writeheader()
    for row in rows:
        extra = set(row) - set(fieldnames)
        if extra:
            raise ValueError(f"row has fields not in the header: {', '.join(sorted(extra))}")
        w.writerow({k: format_value(row.get(k, "")) for k in fieldnames})
    return buf.getvalue().encode("utf-8")


def write_csv(path, rows, fieldnames):
    atomic_write(path, csv_bytes(rows, fieldnames))


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
