"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes  b"LCKP"
    version    u32
    meta_len   u64, then meta_len bytes of UTF-8 JSON (config, task list)
    n_records  u32
    records    name_len u16, name UTF-8, dtype tag u8, ndim u8,
               ndim x u64 dims, payload (float64 little-endian, C order)
    checksum   u64  CRC-64/XZ of every preceding byte

Files are written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ChecksumError, VersionMismatchError
from .network import ArchConfig, BatchNorm, Model, TaskState
from .tucker import SharedCore, TaskFactorSet

MAGIC = b"LCKP"
FORMAT_VERSION = 1
DTYPE_F64 = 1

_CRC64_POLY = 0xC96C5795D7870F42  # ECMA-182, reflected


def _crc_table():
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC_TABLE = _crc_table()


def crc64(data: bytes, crc: int = 0) -> int:
    """CRC-64/XZ (check value for b"123456789" is 0x995DC9BBDF1939FA)."""
    table = _CRC_TABLE
    crc ^= 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def _record(name: str, array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f8")
    encoded = name.encode("utf-8")
    head = struct.pack("<H", len(encoded)) + encoded + struct.pack("<BB", DTYPE_F64, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def named_arrays(model: Model) -> List[Tuple[str, np.ndarray]]:
    out = [(f"core/{b}", c.values) for b, c in enumerate(model.cores)]
    for tid, state in model.tasks.items():
        out.extend((f"task/{tid}/{n}", p.data) for n, p in state.named_parameters())
        out.extend((f"task/{tid}/{n}", buf) for n, buf in state.named_buffers())
    return out


def _metadata(model: Model) -> bytes:
    meta = {
        "format": "latentcore-checkpoint",
        "config": model.config.to_dict(),
        "source_task": model.source_task,
        "cores_frozen": [c.frozen for c in model.cores],
        "tasks": [
            {"id": tid, "num_classes": s.num_classes, "bn": list(s.bn),
             "projections": sorted(s.projections)}
            for tid, s in model.tasks.items()
        ],
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(model: Model) -> bytes:
    meta = _metadata(model)
    arrays = named_arrays(model)
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(meta)), meta,
             struct.pack("<I", len(arrays))]
    parts.extend(_record(name, arr) for name, arr in arrays)
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64(body))


def save_checkpoint(model: Model, path) -> None:
    path = Path(path)
    payload = to_bytes(model)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("unexpected end of checkpoint data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(raw: bytes) -> Model:
    if len(raw) < len(MAGIC) + 12 + 4 + 8:
        raise ChecksumError("checkpoint too short to hold a checksum")
    body, (stored,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if crc64(body) != stored:
        raise ChecksumError("checksum mismatch: checkpoint is corrupt or truncated")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a latentcore checkpoint (bad magic)")
    version, meta_len = r.unpack("<IQ")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        if tag != DTYPE_F64:
            raise CheckpointError(f"record {name!r}: unsupported dtype tag {tag}")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.int64)) * 8
        arrays[name] = np.frombuffer(r.take(size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last record")
    return _assemble(meta, arrays)


def load_checkpoint(path) -> Model:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return from_bytes(raw)


def _assemble(meta: dict, arrays: Dict[str, np.ndarray]) -> Model:
    config = ArchConfig.from_dict(meta["config"])

    def get(name, shape=None):
        try:
            arr = arrays.pop(name)
        except KeyError:
            raise CheckpointError(f"missing tensor {name!r}") from None
        if shape is not None and arr.shape != tuple(shape):
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, expected {tuple(shape)}")
        return arr

    layouts = config.layouts()
    cores = []
    for b, lay in enumerate(layouts):
        core = SharedCore(lay, ad.parameter(get(f"core/{b}", lay.ranks)))
        if meta["cores_frozen"][b]:
            core.freeze()
        cores.append(core)
    model = Model(config, cores, {}, meta["source_task"])
    c_last = config.channels[-1]
    for t in meta["tasks"]:
        tid, k = t["id"], t["num_classes"]
        pre = f"task/{tid}/"
        factors = [
            TaskFactorSet(tid, lay, [ad.parameter(get(f"{pre}factor/{b}/{j}", shape))
                                     for j, shape in enumerate(lay.factor_shapes())])
            for b, lay in enumerate(layouts)
        ]
        stem = ad.parameter(get(pre + "stem", (config.channels[0], config.in_channels, *config.kernel)))
        bn = {}
        for name in t["bn"]:
            bp = f"{pre}bn/{name}/"
            bn[name] = BatchNorm(ad.parameter(get(bp + "gamma")), ad.parameter(get(bp + "beta")),
                                 get(bp + "running_mean").copy(), get(bp + "running_var").copy())
        projections = {
            int(b): ad.parameter(get(f"{pre}proj/{b}",
                                     (config.channels[int(b)], config.channels[int(b) - 1], 1, 1)))
            for b in t["projections"]
        }
        head_w = ad.parameter(get(pre + "head/weight", (k, c_last)))
        head_b = ad.parameter(get(pre + "head/bias", (k,)))
        model.tasks[tid] = TaskState(tid, k, factors, stem, bn, projections, head_w, head_b)
    if arrays:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(arrays)[:5]}")
    return model
