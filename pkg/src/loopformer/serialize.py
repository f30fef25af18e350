"""Versioned binary checkpoint container.

Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON header,
then the raw tensor blob. Tensors are stored little-endian row-major at the
offsets recorded in the header, so a round-trip is bitwise lossless.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"LOOPFCKP"
VERSION = 1

_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write named arrays plus a JSON-serializable metadata record."""
    index = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.name not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        blob = arr.astype(_DTYPE_TAGS[arr.dtype.name]).tobytes()
        index.append({"name": name, "shape": list(arr.shape),
                      "dtype": arr.dtype.name, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r} in {path}")
        version, header_len = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode())
        blob = fh.read()
    tensors = {}
    for entry in header["tensors"]:
        tag = _DTYPE_TAGS[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype=tag, count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.astype(entry["dtype"]).reshape(entry["shape"])
    return tensors, header["meta"]


def rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def rng_from_json(state: dict) -> np.random.Generator:
    name = state["bit_generator"]
    bitgen = getattr(np.random, name)()
    bitgen.state = state
    return np.random.Generator(bitgen)
