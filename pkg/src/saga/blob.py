"""Reader/writer for the weight-blob interchange file.

Layout (see docs/weight_blob.md for the full contract):

    magic "SWB1" | u32 manifest_len | manifest JSON | f32 LE tensor data

The manifest carries a ``meta`` dict (dims, head counts, layer index)
and a ``tensors`` list of ``{name, shape, offset}`` where offset counts
float32 elements into the data region. Weight matrices are stored
(in_features, out_features) so forward passes are plain ``x @ W``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

BLOB_MAGIC = b"SWB1"


class BlobFormatError(ValueError):
    pass


def write_blob(path, meta: dict, tensors: dict) -> None:
    """tensors: name -> float array (stored as f32)."""
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = json.dumps(
        {"format_version": 1, "meta": meta, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)


def read_blob(path):
    """Returns (meta dict, {name: float64 ndarray})."""
    raw = Path(path).read_bytes()
    if raw[:4] != BLOB_MAGIC:
        raise BlobFormatError(f"bad magic {raw[:4]!r} at byte 0")
    (mlen,) = struct.unpack_from("<I", raw, 4)
    manifest = json.loads(raw[8 : 8 + mlen].decode())
    if manifest.get("format_version") != 1:
        raise BlobFormatError(f"unsupported format_version {manifest.get('format_version')}")
    data_start = 8 + mlen
    tensors = {}
    for ent in manifest["tensors"]:
        size = int(np.prod(ent["shape"])) if ent["shape"] else 1
        start = data_start + 4 * ent["offset"]
        end = start + 4 * size
        if end > len(raw):
            raise BlobFormatError(f"tensor {ent['name']} overruns file at byte {len(raw)}")
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=start)
        tensors[ent["name"]] = arr.astype(np.float64).reshape(ent["shape"])
    return manifest["meta"], tensors
