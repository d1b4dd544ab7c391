"""Binary checkpoints: config, every tensor, optimizer state and history.

Layout (all integers little-endian)::

    b"INPF"  u32 version  u32 meta_len  meta (UTF-8 JSON, sorted keys)
    PTF1 blob * n          u32 CRC32 of every preceding byte

``meta["tensors"]`` lists ``name``, ``shape``, ``offset`` and ``length`` of
each blob, with offsets counted from the first blob. Nothing time- or
host-dependent is stored, so equal runs give equal bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .encoder import ViTEncoder
from .errors import FormatError
from .inp import INPFormer, init_params
from .io import ptf_dumps, ptf_loads
from .optim import OptimizerState
from .train import LossRecord, TrainState

MAGIC = b"INPF"
VERSION = 1


@dataclass
class Checkpoint:
    model: INPFormer
    state: TrainState

    @property
    def epoch(self) -> int:
        return self.state.epoch


def _tensor_table(model: INPFormer, state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{n}", p.data) for n, p in model.params.items()]
    out += [(f"encoder/{n}", p.data) for n, p in model.encoder.params.items()]
    out.append(("encoder/pos", model.encoder.pos.data))
    for name in model.params:
        if name in state.opt.m:
            out.append((f"adam_m/{name}", state.opt.m[name]))
            out.append((f"adam_v/{name}", state.opt.v[name]))
    return out


def dumps(model: INPFormer, state: TrainState) -> bytes:
    blobs = []
    table = []
    offset = 0
    for name, arr in _tensor_table(model, state):
        blob = ptf_dumps(arr)
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    opt = state.opt.hyper()
    meta = {
        "config": model.cfg.to_dict(),
        "epoch": state.epoch,
        "seed": model.cfg.seed,
        "optimizer": opt,
        "history": [list(r) for r in state.history],
        "tensors": table,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(meta_bytes)) + meta_bytes + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, model: INPFormer, state: TrainState) -> bytes:
    """Write atomically (temp file then rename); returns the bytes written."""
    data = dumps(model, state)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return data


def loads(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError("not an INPF checkpoint (bad magic or too short)")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (expected {VERSION})")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError("checkpoint CRC mismatch (corrupt or truncated file)")
    start = 12 + meta_len
    if start > len(data) - 4:
        raise FormatError("checkpoint metadata overruns the file")
    try:
        meta = json.loads(data[12:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint metadata: {exc}") from exc
    blob_end = len(data) - 4
    tensors = {}
    for entry in meta["tensors"]:
        at = start + entry["offset"]
        arr, end = ptf_loads(data[:blob_end], at)
        if end - at != entry["length"] or list(arr.shape) != entry["shape"]:
            raise FormatError(f"tensor {entry['name']}: manifest does not match payload")
        tensors[entry["name"]] = arr
    return _rebuild(meta, tensors)


def _assign(store, prefix: str, tensors: dict) -> None:
    for name, p in store.items():
        key = f"{prefix}/{name}"
        if key not in tensors:
            raise FormatError(f"checkpoint lacks tensor {key}")
        if tensors[key].shape != p.data.shape:
            raise FormatError(f"tensor {key}: shape {tensors[key].shape} != {p.data.shape}")
        p.data = tensors[key]


def _rebuild(meta: dict, tensors: dict) -> Checkpoint:
    cfg = ModelConfig.from_dict(meta["config"])
    encoder = ViTEncoder(cfg)
    _assign(encoder.params, "encoder", tensors)
    encoder.pos.data = tensors["encoder/pos"]
    params = init_params(cfg)
    _assign(params, "param", tensors)
    known = {f"{kind}/{n}" for kind, store in (("param", params), ("encoder", encoder.params)) for n in store}
    known |= {"encoder/pos"} | {f"adam_{mv}/{n}" for mv in "mv" for n in params}
    extra = set(tensors) - known
    if extra:
        raise FormatError(f"checkpoint has unexpected tensors: {sorted(extra)[:5]}")
    opt = OptimizerState(**meta["optimizer"])
    for name in params:
        if f"adam_m/{name}" in tensors:
            opt.m[name] = tensors[f"adam_m/{name}"]
            opt.v[name] = tensors[f"adam_v/{name}"]
    history = [LossRecord(int(r[0]), *(float(x) for x in r[1:])) for r in meta["history"]]
    state = TrainState(opt, int(meta["epoch"]), history)
    return Checkpoint(INPFormer(cfg, encoder, params), state)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
