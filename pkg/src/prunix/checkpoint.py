"""Binary checkpoint format.

Layout::

    PRUNIX-CKPT 1\\n
    <manifest byte length>\\n
    <manifest: UTF-8 JSON>
    <payload: raw little-endian arrays, back to back>

The manifest lists ``name``, ``dtype``, ``shape``, ``offset`` and ``nbytes`` for
every array (offsets relative to the payload start) plus a free-form ``meta``
object. Round-trips are bit exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import LayerSpec, Model
from .tensor import Tensor

MAGIC = b"PRUNIX-CKPT 1\n"
_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4"), "u8": np.dtype("u1"),
           "f64": np.dtype("<f8")}
_NAMES = {v: k for k, v in _DTYPES.items()}


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype == bool:
            arr = arr.astype("u1")
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _NAMES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "dtype": _NAMES[dt], "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries},
                          sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(manifest)}\n".encode())
        fh.write(manifest)
        for c in chunks:
            fh.write(c)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: not a prunix checkpoint")
    pos = len(MAGIC)
    nl = blob.index(b"\n", pos)
    size = int(blob[pos:nl])
    manifest = json.loads(blob[nl + 1:nl + 1 + size].decode("utf-8"))
    base = nl + 1 + size
    arrays = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype=_DTYPES[e["dtype"]])
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return arrays, manifest["meta"]


def model_arrays(model: Model) -> dict[str, np.ndarray]:
    arrays = {}
    for i in model.weight_layers:
        arrays[f"layer{i}.weight"] = model.weights[i].data
        arrays[f"layer{i}.bias"] = model.biases[i].data
        if i in model.masks:
            arrays[f"layer{i}.mask"] = model.masks[i]
    return arrays


def save_model(path, model: Model, meta: dict | None = None,
               extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = model_arrays(model)
    arrays.update(extra or {})
    save_arrays(path, arrays, {"architecture": model.architecture(), **(meta or {})})


def load_model(path) -> tuple[Model, dict, dict[str, np.ndarray]]:
    """Return ``(model, meta, leftover_arrays)``."""
    arrays, meta = load_arrays(path)
    arch = meta["architecture"]
    model = Model([LayerSpec(**l) for l in arch["layers"]], arch["input_shape"],
                  arch["num_classes"], seed=None,
                  regularized_layers=arch["regularized_layers"])
    for i in model.weight_layers:
        model.weights[i] = Tensor(arrays.pop(f"layer{i}.weight"))
        model.biases[i] = Tensor(arrays.pop(f"layer{i}.bias"))
        m = arrays.pop(f"layer{i}.mask", None)
        if m is not None:
            model.masks[i] = m.astype(bool)
    return model, meta, arrays
