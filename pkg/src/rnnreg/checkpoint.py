"""Versioned binary checkpoints.

Byte layout (documented contract, little-endian):

    bytes 0-3   magic b"RNRG"
    bytes 4-7   format version, uint32 (currently 1)
    bytes 8-11  header length N, uint32
    bytes 12-.. N bytes of UTF-8 JSON:
                {"arrays": [{"name": str, "shape": [int, ...]}, ...],
                 "dtype": "<f8", "meta": {...}}
    then        the arrays' raw C-order float64 buffers, concatenated in
                header order

``meta`` carries what is needed to rebuild the model container (cell kind,
layer count, sizes, input encoding).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError
from .model import SequenceModel, build_model

MAGIC = b"RNRG"
VERSION = 1


def save_model(path: str, model: SequenceModel, extra_meta: dict | None = None) -> None:
    arrays = [(name, t.data) for name, t in model.parameters()]
    header = {
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "dtype": "<f8",
        "meta": {
            "cell": model.cell_kind,
            "layers": model.layers,
            "input_size": model.input_size,
            "hidden_size": model.hidden_size,
            "output_size": model.output_size,
            "input_kind": model.input_kind,
            **(extra_meta or {}),
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise DataError(f"{path}: truncated checkpoint at array {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, header["meta"]


def load_model(path: str) -> tuple[SequenceModel, dict]:
    """Rebuild a model container from a checkpoint and load its weights."""
    arrays, meta = load_arrays(path)
    model = build_model(
        meta["cell"],
        meta["layers"],
        meta["input_size"],
        meta["hidden_size"],
        meta["output_size"],
        np.random.default_rng(0),
        input_kind=meta["input_kind"],
    )
    for name, t in model.parameters():
        if name not in arrays:
            raise DataError(f"{path}: checkpoint missing array {name!r}")
        if arrays[name].shape != t.data.shape:
            raise DataError(
                f"{path}: array {name!r} has shape {arrays[name].shape}, "
                f"expected {t.data.shape}"
            )
        t.data[...] = arrays[name]
    return model, meta
