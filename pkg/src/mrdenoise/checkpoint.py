"""Checkpoint container.

Layout: ``b"CKPT"``, uint32-LE manifest length, UTF-8 JSON manifest, then the
little-endian float32 payloads of every tensor concatenated in manifest
order. Each manifest tensor entry carries ``name``, ``shape`` and the byte
``offset`` of its payload relative to the end of the manifest.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mrdenoise.errors import BadMagicError, PayloadLengthError, TruncatedPayloadError

CKPT_MAGIC = b"CKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to resume training bit-exactly.

    ``arrays`` maps names such as ``param/<p>``, ``adam_m/<p>``,
    ``adam_v/<p>``, ``bn_mean/<b>``, ``bn_var/<b>`` to float32 arrays;
    ``meta`` holds the JSON-serialisable remainder (configs, epoch, Adam
    step, batch-norm update counts, RNG derivation, best validation score).
    """

    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def encode_checkpoint(ckpt):
    entries = []
    payloads = []
    offset = 0
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": FORMAT_VERSION, "meta": ckpt.meta, "tensors": entries}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(payloads)


def decode_checkpoint(buf, source="<bytes>"):
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{source}: not a CKPT file")
    if len(buf) < 8:
        raise TruncatedPayloadError(f"{source}: manifest length field truncated")
    (n,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + n:
        raise TruncatedPayloadError(f"{source}: manifest truncated")
    manifest = json.loads(buf[8:8 + n].decode("utf-8"))
    body = memoryview(buf)[8 + n:]
    arrays = {}
    end = 0
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        stop = start + 4 * count
        if stop > len(body):
            raise TruncatedPayloadError(f"{source}: tensor {entry['name']} runs past the end of the file")
        arrays[entry["name"]] = np.frombuffer(body[start:stop], dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        end = max(end, stop)
    if end != len(body):
        raise PayloadLengthError(f"{source}: {len(body) - end} unexpected trailing bytes")
    return Checkpoint(arrays, manifest["meta"])


def save_checkpoint(ckpt, path):
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes(), str(path))
