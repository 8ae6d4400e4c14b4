"""Named-tensor archive used for model checkpoints and backbone weights.

File layout::

    b"PSTRARCH"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length in bytes
    header                 UTF-8 JSON: {"config": {...}, "tensors": [manifest rows]}
    payload                raw little-endian tensor bytes, concatenated

Each manifest row is ``{"name", "dtype", "shape", "offset", "nbytes"}`` with
``offset`` relative to the start of the payload. Serialization is canonical
(sorted JSON keys, insertion-ordered tensors), so save -> load -> save is
byte-identical.
"""

import json
import os
import struct
from collections import OrderedDict
from typing import Any, Dict, Mapping, Tuple

import numpy as np
import torch

MAGIC = b"PSTRARCH"
VERSION = 1

# float32 is the payload type for all learnable state; int64 only carries
# integer counters such as BatchNorm's num_batches_tracked.
_DTYPES = {
    torch.float32: ("float32", "<f4"),
    torch.int64: ("int64", "<i8"),
}
_BY_NAME = {name: (tdt, npdt) for tdt, (name, npdt) in _DTYPES.items()}


class ArchiveError(ValueError):
    pass


def _to_bytes(t: torch.Tensor) -> Tuple[str, bytes]:
    if t.dtype not in _DTYPES:
        raise ArchiveError(f"unsupported dtype {t.dtype}; store float32 or int64")
    name, npdt = _DTYPES[t.dtype]
    arr = t.detach().cpu().contiguous().numpy().astype(npdt, copy=False)
    return name, arr.tobytes(order="C")


def dumps(tensors: Mapping[str, torch.Tensor], config: Mapping[str, Any] = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, t in tensors.items():
        dtype, raw = _to_bytes(t)
        manifest.append({"name": name, "dtype": dtype, "shape": list(t.shape),
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    names = [row["name"] for row in manifest]
    if len(set(names)) != len(names):
        raise ArchiveError("duplicate tensor names")
    header = json.dumps({"config": dict(config or {}), "tensors": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<IQ", VERSION, len(header)), header, *chunks])


def loads(blob: bytes) -> Tuple["OrderedDict[str, torch.Tensor]", Dict[str, Any]]:
    if blob[:8] != MAGIC:
        raise ArchiveError("not a tensor archive (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    start = 8 + 12
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    payload = memoryview(blob)[start + hlen:]
    tensors = OrderedDict()
    for row in header["tensors"]:
        if row["dtype"] not in _BY_NAME:
            raise ArchiveError(f"unsupported dtype {row['dtype']!r} for {row['name']}")
        tdt, npdt = _BY_NAME[row["dtype"]]
        lo, n = row["offset"], row["nbytes"]
        if lo + n > len(payload):
            raise ArchiveError(f"truncated payload for {row['name']}")
        arr = np.frombuffer(payload[lo:lo + n], dtype=npdt).reshape(row["shape"])
        tensors[row["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).to(tdt)
    return tensors, header["config"]


def save(path, tensors: Mapping[str, torch.Tensor], config: Mapping[str, Any] = None) -> None:
    blob = dumps(tensors, config)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load(path) -> Tuple["OrderedDict[str, torch.Tensor]", Dict[str, Any]]:
    with open(path, "rb") as fh:
        return loads(fh.read())

