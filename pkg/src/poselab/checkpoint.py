"""Checkpoint files: JSON manifest + float32 little-endian blob + CRC32.

Layout::

    b"DCPK" | u16 version | u32 manifest length | manifest JSON | blob | u32 CRC32

The CRC covers every byte before it.  The manifest carries the epoch, the
model-config hash, and a tensor table (name, block, shape, dtype, byte
offset into the blob), plus the model config and routing so that a
checkpoint is self-describing.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, TruncatedFileError, VersionMismatchError
from .numgrad import ParamStore
from .posenet import ModelConfig

MAGIC = b"DCPK"
VERSION = 1


@dataclass
class Checkpoint:
    epoch: int
    config: ModelConfig
    params: ParamStore
    routing: dict | None = None
    extra: dict | None = None


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    table, blobs, offset = [], [], 0
    for name in ck.params.names():
        arr = np.ascontiguousarray(ck.params[name], dtype="<f4")
        table.append({
            "name": name,
            "block": ck.params.block_of(name),
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": offset,
        })
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "epoch": ck.epoch,
        "config_hash": ck.config.digest(),
        "model_config": ck.config.to_json(),
        "routing": ck.routing,
        "extra": ck.extra or {},
        "blob_bytes": offset,
        "tensors": table,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<HI", VERSION, len(mbytes)) + mbytes + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ck: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    tmp.replace(path)


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise BadMagicError("not a checkpoint file")
    if len(buf) < 14:
        raise TruncatedFileError("file ends inside the preamble")
    version, mlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    if len(buf) < 10 + mlen + 4:
        raise TruncatedFileError("file ends inside the manifest")
    try:
        manifest = json.loads(buf[10:10 + mlen].decode("utf-8"))
        expected = 10 + mlen + manifest["blob_bytes"] + 4
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError):
        manifest, expected = None, None
    if expected is not None and len(buf) < expected:
        raise TruncatedFileError(f"expected {expected} bytes, found {len(buf)}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    if manifest is None or len(buf) != expected:
        raise ChecksumError("manifest inconsistent with payload")

    config = ModelConfig.from_json(manifest["model_config"])
    if config.digest() != manifest["config_hash"]:
        raise ChecksumError("config hash does not match model config")
    base = 10 + mlen
    store = ParamStore()
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=base + entry["offset"])
        store.add(entry["name"], arr.reshape(entry["shape"]).astype(np.float64), entry["block"])
    return Checkpoint(manifest["epoch"], config, store, manifest.get("routing"), manifest.get("extra"))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
