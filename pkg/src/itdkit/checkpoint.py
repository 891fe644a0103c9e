"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..3    magic ``ITDC``
    bytes 4..7    format version (uint32)
    bytes 8..15   manifest length in bytes (uint64)
    manifest      UTF-8 JSON: {"meta": {...}, "tensors": [
                      {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    data region   concatenated raw tensor bytes at the stated offsets

Floating point tensors are stored as little-endian 32-bit floats
(``<f4``); integer tensors as ``<i8``/``<u8``. The manifest ``meta``
carries the run config, mode, vocabulary size and the activity type
table (text and hash) so a detector can refuse mismatched vocabularies.
"""

from __future__ import annotations

import json

import numpy as np
import torch

MAGIC = b"ITDC"
VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8"),
           "<u8": np.dtype("<u8")}


class CheckpointError(ValueError):
    pass


def _canonical(array):
    array = np.asarray(array)
    if array.dtype.kind == "f":
        return array.astype("<f4")
    if array.dtype.kind == "i":
        return array.astype("<i8")
    if array.dtype.kind == "u":
        return array.astype("<u8")
    raise CheckpointError(f"unsupported dtype {array.dtype}")


def save_checkpoint(path, tensors, meta):
    """tensors: dict name -> ndarray; meta: JSON-serializable dict."""
    entries = []
    blobs = []
    offset = 0
    for name in tensors:
        arr = _canonical(tensors[name])
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta, "tensors": entries},
                          sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(np.uint64(len(manifest)).tobytes())
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Returns (tensors dict, meta dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = int(np.frombuffer(blob[4:8], "<u4")[0])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    man_len = int(np.frombuffer(blob[8:16], "<u8")[0])
    manifest = json.loads(blob[16:16 + man_len].decode("utf-8"))
    data = blob[16 + man_len:]
    tensors = {}
    for entry in manifest["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"unknown tensor dtype {entry['dtype']}")
        raw = data[entry["offset"]: entry["offset"] + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(raw, dtype).reshape(
            entry["shape"]).copy()
    return tensors, manifest["meta"]


def save_model(path, model, table, extra_meta=None):
    """Serialize an ActivityModel (including an attached pool's keys and
    vectors) with its config and type-table fingerprint."""
    tensors = {}
    for name, tensor in model.state_dict().items():
        tensors[name] = tensor.detach().cpu().numpy()
    if model.pool is not None:
        tensors["pool.keys"] = model.pool.keys
    meta = {
        "kind": "itdkit-model",
        "mode": model.mode,
        "vocab_size": model.vocab_size,
        "config": model.config.to_dict(),
        "type_table": table.to_text(),
        "type_table_sha256": table.sha256(),
        "pool_mode": model.pool.mode if model.pool is not None else None,
        "pool_size": len(model.pool) if model.pool is not None else 0,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, tensors, meta)


def load_model(path, expected_mode=None):
    """Rebuild the model (and pool; its index is rebuilt lazily, never
    deserialized). Returns (model, table, meta)."""
    from .config import RunConfig
    from .ingest import ActivityTypeTable
    from .pool import VectorPool
    from .scorer import ActivityModel

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "itdkit-model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    if expected_mode is not None and meta["mode"] != expected_mode:
        raise CheckpointError(
            f"{path}: checkpoint is {meta['mode']!r} mode, need "
            f"{expected_mode!r} (post-hoc detection requires a "
            "bidirectional checkpoint)")
    table = ActivityTypeTable(
        [line.split("/", 1) for line in meta["type_table"].splitlines()])
    if table.sha256() != meta["type_table_sha256"]:
        raise CheckpointError(f"{path}: type table hash mismatch")
    config = RunConfig.from_dict(meta["config"])
    model = ActivityModel(meta["vocab_size"], config, mode=meta["mode"])
    if meta.get("pool_size"):
        pool = VectorPool(tensors.pop("pool.keys"), config.hidden_size,
                          mode=meta["pool_mode"], seed=config.seed)
        pool._index_params = dict(
            metric=config.ann_metric, m=config.ann_m,
            ef_construction=config.ann_ef_construction,
            ef_search=config.ann_ef_search, seed=config.seed)
        model.attach_pool(pool)
    state = {}
    for name, arr in tensors.items():
        state[name] = torch.as_tensor(arr)
    model.load_state_dict(state)
    return model, table, meta
