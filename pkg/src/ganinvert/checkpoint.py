"""Binary container shared by generator, encoder and extractor checkpoints.

Layout (little-endian)::

    magic         6 bytes   b"GCKPT1" | b"ECKPT1" | b"FCKPT1"
    version       uint32
    header_len    uint32
    header        header_len bytes of canonical JSON (sorted keys, no spaces)
    tensors       float32 data for each entry of header["tensors"], in order

The header always carries ``layer_spec`` as a newline-joined text block so a
checkpoint is self-describing.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from typing import Dict, Tuple

import numpy as np
import torch

from .errors import PersistenceError

FORMAT_VERSION = 1

GENERATOR_MAGIC = b"GCKPT1"
ENCODER_MAGIC = b"ECKPT1"
EXTRACTOR_MAGIC = b"FCKPT1"

_PREFIX = struct.Struct("<6sII")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_container(path, magic: bytes, header: dict, tensors: Dict[str, torch.Tensor]) -> None:
    header = dict(header)
    header["tensors"] = [[name, list(t.shape)] for name, t in tensors.items()]
    head_bytes = canonical_json(header).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(head_bytes)))
            fh.write(head_bytes)
            for t in tensors.values():
                fh.write(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def read_container(path, magic: bytes) -> Tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise PersistenceError(f"{path}: cannot read checkpoint ({exc})") from exc
    if len(data) < _PREFIX.size:
        raise PersistenceError(f"{path}: truncated checkpoint header")
    found, version, head_len = _PREFIX.unpack_from(data)
    if found != magic:
        raise PersistenceError(f"{path}: bad magic {found!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise PersistenceError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size
    if len(data) < start + head_len:
        raise PersistenceError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[start : start + head_len].decode("utf-8"))
        entries = [(str(name), tuple(int(s) for s in shape)) for name, shape in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise PersistenceError(f"{path}: corrupt checkpoint header ({exc})") from exc

    offset = start + head_len
    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for name, shape in entries:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise PersistenceError(f"{path}: truncated tensor data at {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
        offset = end
    if offset != len(data):
        raise PersistenceError(f"{path}: {len(data) - offset} trailing bytes after tensor data")
    return header, tensors


def load_state(module: torch.nn.Module, tensors, path) -> None:
    expected = module.state_dict()
    if list(expected) != list(tensors):
        raise PersistenceError(f"{path}: tensor names do not match the model declaration")
    for name, t in tensors.items():
        if tuple(expected[name].shape) != tuple(t.shape):
            raise PersistenceError(f"{path}: tensor {name!r} has shape {tuple(t.shape)}, expected {tuple(expected[name].shape)}")
    module.load_state_dict(tensors)
