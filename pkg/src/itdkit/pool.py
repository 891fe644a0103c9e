"""System-wide activity vector pool with approximate retrieval.

The pool holds one vector per deduplicated normal training activity
(keyed by a hash of the instance's full code context), searched by an
HNSW index over the current vector values. Two semantics are supported:

* ``trainable``: rows are free parameters optimized with the model;
* ``encoder_cache``: rows are re-encoded from their stored code
  sequences by the current encoder at every refresh.

Neighbor selection is non-differentiable: gradients flow into retrieved
vectors' values, never into the selection itself.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn as nn

from .ann import HnswIndex
from .ingest import PhInstance, RtInstance

POOL_MODES = ("trainable", "encoder_cache")


class EmptyPool(ValueError):
    """No normal training instances were available to pool."""


class PoolTooSmall(ValueError):
    """A query was issued against an empty pool."""


def instance_key(instance):
    """Stable 64-bit dedup key over the instance's full code context."""
    if isinstance(instance, RtInstance):
        seq = instance.prefix + (instance.target,)
    elif isinstance(instance, PhInstance):
        seq = instance.codes + (instance.position, instance.target)
    else:
        seq = tuple(instance)
    digest = hashlib.blake2b(
        np.asarray(seq, dtype="<u8").tobytes(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def _instance_codes(instance):
    """(codes, query position) for re-encoding a pooled sub-sequence:
    a real-time entry is the prefix plus its activity, pooled at the
    last position; a post-hoc entry is the masked session, pooled at the
    masked position."""
    if isinstance(instance, RtInstance):
        return instance.prefix + (instance.target,), len(instance.prefix)
    return instance.codes, instance.position


class VectorPool(nn.Module):
    """Deduplicated activity vectors plus an ANN search structure."""

    def __init__(self, keys, dim, mode="trainable", seed=0, sequences=None):
        super().__init__()
        if mode not in POOL_MODES:
            raise ValueError(f"unknown pool mode {mode!r}")
        if len(keys) == 0:
            raise EmptyPool("vector pool must contain at least one row")
        self.mode = mode
        self.dim = dim
        self.seed = seed
        self.keys = np.asarray(keys, dtype=np.uint64)
        self.sequences = sequences
        gen = torch.Generator().manual_seed(seed)
        init = torch.randn(len(keys), dim, generator=gen)
        if mode == "trainable":
            self.vectors = nn.Parameter(init)
        else:
            self.register_buffer("vectors", init)
        self.index = None
        self.rebuild_count = 0
        self.staleness_counter = 0

    def __len__(self):
        return len(self.keys)

    @classmethod
    def build(cls, instances, dim, mode="trainable", seed=0):
        """One row per unique dedup key among normal-labeled instances."""
        keys, sequences, seen = [], [], set()
        for inst in instances:
            if inst.label:
                continue
            key = instance_key(inst)
            if key in seen:
                continue
            seen.add(key)
            keys.append(key)
            sequences.append(_instance_codes(inst))
        if not keys:
            raise EmptyPool("no normal instances to pool")
        return cls(keys, dim, mode=mode, seed=seed,
                   sequences=sequences if mode == "encoder_cache" else None)

    def build_index(self, metric="cosine", m=24, ef_construction=200,
                    ef_search=256, seed=None):
        """(Re)build the small-world graph index over current values."""
        self._index_params = dict(metric=metric, m=m,
                                  ef_construction=ef_construction,
                                  ef_search=ef_search,
                                  seed=self.seed if seed is None else seed)
        self.index = HnswIndex(self.dim, **self._index_params)
        with torch.no_grad():
            self.index.add_items(self.vectors.detach().cpu().numpy())
        self.rebuild_count += 1
        self.staleness_counter = 0
        return self.index

    def refresh(self, encode_fn=None, batch_size=1024):
        """Rebuild the index from current (drifted) vector values. In
        encoder_cache mode, first re-encode the stored sequences with
        ``encode_fn`` (list of code tuples -> (n, d) tensor)."""
        if self.mode == "encoder_cache":
            if encode_fn is None:
                raise ValueError("encoder_cache refresh needs an encode_fn")
            chunks = []
            with torch.no_grad():
                for lo in range(0, len(self.sequences), batch_size):
                    chunk = self.sequences[lo:lo + batch_size]
                    chunks.append(encode_fn(chunk).detach())
            self.vectors.copy_(torch.cat(chunks, dim=0).to(self.vectors.dtype))
        params = getattr(self, "_index_params", None)
        return self.build_index(**params) if params else self.build_index()

    def query_topk(self, queries, k):
        """Approximately the k nearest rows per query (cosine by
        default); exact when k >= pool size. queries: (B, d) array-like.
        Returns int64 ids of shape (B, min(k, len(pool)))."""
        if len(self) == 0:
            raise PoolTooSmall("pool is empty")
        if k < 1:
            raise ValueError("k must be >= 1")
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if k >= len(self):
            return np.tile(np.arange(len(self), dtype=np.int64),
                           (queries.shape[0], 1))
        if self.index is None:
            self.build_index(**getattr(self, "_index_params", {}))
        ids, _ = self.index.query_batch(queries, k)
        return ids

    def neighbor_vectors(self, ids):
        """Gather rows as a tensor; differentiable w.r.t. the rows in
        trainable mode. ids: (B, k) int array."""
        idx = torch.as_tensor(np.asarray(ids), dtype=torch.long,
                              device=self.vectors.device)
        return self.vectors[idx]
