"""Self-describing binary checkpoints.

Layout::

    b"SGCNLSTM"                       8-byte magic
    uint32 LE                         format version
    uint64 LE                         header length in bytes
    header                            UTF-8 JSON
    float64 LE arrays                 concatenated in header order

The header records model dims, the training config, the scaler mode, the
optimizer step count, and for every tensor its name, shape and byte offset
relative to the start of the data block.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Scaler
from .errors import CheckpointError
from .model import PARAM_NAMES, ModelParams, param_shapes
from .train import OptState

MAGIC = b"SGCNLSTM"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    params: ModelParams
    opt: OptState
    scaler: Scaler
    config: dict

    @property
    def dims(self) -> dict[str, int]:
        return self.params.dims


def _tensors(params: ModelParams, opt: OptState, scaler: Scaler) -> list[tuple[str, np.ndarray]]:
    out = [(f"params.{k}", v) for k, v in params.items()]
    out += [(f"opt.m.{k}", v) for k, v in opt.m.items()]
    out += [(f"opt.v.{k}", v) for k, v in opt.v.items()]
    out += [("scaler.mean", scaler.mean), ("scaler.std", scaler.std)]
    return out


def save_checkpoint(params: ModelParams, opt: OptState, scaler: Scaler, config: dict, path) -> Path:
    """Write atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    entries, offset, blobs = [], 0, []
    for name, arr in _tensors(params, opt, scaler):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(data)
        blobs.append(data)
    header = {
        "dims": params.dims,
        "config": config,
        "scaler_mode": scaler.mode,
        "opt_step": opt.t,
        "tensors": entries,
        "data_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
            fh.write(head)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, expected_dims: dict[str, int] | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected_dims`` every parameter shape is checked."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated before header")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    start = _PREFIX.size + head_len
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated inside header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    body = raw[start:]
    if len(body) != header["data_bytes"]:
        raise CheckpointError(
            f"{path}: data block has {len(body)} bytes, header declares {header['data_bytes']}"
        )
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + 8 * count
        if end > len(body):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        arrays[entry["name"]] = (
            np.frombuffer(body, dtype="<f8", count=count, offset=entry["offset"])
            .astype(np.float64).reshape(entry["shape"])
        )

    dims = header["dims"]
    shapes = param_shapes(**dims)
    if expected_dims is not None:
        want = param_shapes(**expected_dims)
        for name in PARAM_NAMES:
            if want[name] != shapes[name]:
                raise CheckpointError(
                    f"{path}: {name} has shape {shapes[name]} in checkpoint, "
                    f"config expects {want[name]}"
                )

    def group(prefix: str) -> ModelParams:
        out = {}
        for name in PARAM_NAMES:
            key = f"{prefix}{name}"
            if key not in arrays:
                raise CheckpointError(f"{path}: missing tensor {key}")
            if arrays[key].shape != shapes[name]:
                raise CheckpointError(
                    f"{path}: {key} has shape {arrays[key].shape}, dims imply {shapes[name]}"
                )
            out[name] = arrays[key]
        return ModelParams(**out)

    params = group("params.")
    opt = OptState(group("opt.m."), group("opt.v."), int(header["opt_step"]))
    for key in ("scaler.mean", "scaler.std"):
        if key not in arrays:
            raise CheckpointError(f"{path}: missing tensor {key}")
    scaler = Scaler(arrays["scaler.mean"], arrays["scaler.std"], header["scaler_mode"])
    return Checkpoint(params, opt, scaler, header["config"])
