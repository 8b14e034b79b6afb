"""Binary checkpoint format shared by all policies.

Layout: magic "RDX1", format version (u32 LE), then per-tensor records:
name length (u32), name bytes (utf-8), rank (u32), dims (u32 each),
payload as little-endian float64. Round-trips are bit-exact.

Non-tensor metadata (policy kind, mask, k, ...) travels as a JSON string
encoded into a 1-D tensor of codepoints under the reserved name
"__manifest__".
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"RDX1"
VERSION = 1
MANIFEST_KEY = "__manifest__"


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray],
                 manifest: dict | None = None) -> None:
    records = dict(tensors)
    if manifest is not None:
        text = json.dumps(manifest, sort_keys=True)
        records[MANIFEST_KEY] = np.array([ord(c) for c in text], dtype=np.float64)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name in sorted(records):
            arr = np.ascontiguousarray(records[name], dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f8").tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict | None]:
    """Returns (tensors, manifest-or-None)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    tensors: dict[str, np.ndarray] = {}
    while pos < len(data):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).copy()
        pos += 8 * count
        tensors[name] = arr.reshape(dims)
    manifest = None
    if MANIFEST_KEY in tensors:
        codes = tensors.pop(MANIFEST_KEY)
        manifest = json.loads("".join(chr(int(c)) for c in codes))
    return tensors, manifest
