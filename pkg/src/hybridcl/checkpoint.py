"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"HYBCLCKP"
    version    u8
    meta_len   u32, followed by meta_len bytes of UTF-8 JSON
    count      u32
    count records of:
        name_len u32, name (UTF-8)
        ndim     u32, ndim x u64 dims
        data     prod(dims) x f64 (row-major)

Model checkpoints keep the model config in the meta block. CL state
checkpoints also keep the method, hyperparameters and task count there, and
prefix record names with a section (``anchor/``, ``importance/``, ``frozen/``).
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import HybridModel, ModelConfig
from .numcore import Params
from .strategies import CLHyper, CLState

MAGIC = b"HYBCLCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_records(path, records: Params, meta: str = "") -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    meta_b = meta.encode("utf-8")
    buf.write(struct.pack("<I", len(meta_b)))
    buf.write(meta_b)
    buf.write(struct.pack("<I", len(records)))
    for name, value in records.items():
        arr = np.asarray(value, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    atomic_write_bytes(path, buf.getvalue())


def read_records(path) -> tuple[Params, str]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<B", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 9
    (meta_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = data[pos:pos + meta_len].decode("utf-8")
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    records = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
        records[name] = arr.astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return records, meta


def save_model(path, model: HybridModel) -> None:
    write_records(path, model.params, json.dumps({"config": model.config.__dict__}))


def load_model(path) -> HybridModel:
    records, meta = read_records(path)
    cfg = ModelConfig(**json.loads(meta)["config"])
    return HybridModel(cfg, records)


def save_state(path, state: CLState, config: ModelConfig) -> None:
    records = {}
    for section, params in (("anchor", state.anchor), ("importance", state.importance),
                            ("frozen", state.frozen.params if state.frozen is not None else None)):
        if params is not None:
            records.update({f"{section}/{n}": v for n, v in params.items()})
    meta = {"method": state.method, "tasks_seen": state.tasks_seen,
            "hyper": state.hyper.__dict__, "config": config.__dict__}
    write_records(path, records, json.dumps(meta))


def load_state(path) -> CLState:
    records, meta_s = read_records(path)
    meta = json.loads(meta_s)
    sections: dict[str, Params] = {}
    for key, value in records.items():
        section, name = key.split("/", 1)
        sections.setdefault(section, {})[name] = value
    frozen = None
    if "frozen" in sections:
        frozen = HybridModel(ModelConfig(**meta["config"]), sections["frozen"])
    return CLState(method=meta["method"], hyper=CLHyper(**meta["hyper"]),
                   anchor=sections.get("anchor"), importance=sections.get("importance"),
                   frozen=frozen, tasks_seen=int(meta["tasks_seen"]))


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
