"""Anomaly score prediction: GNN enhancement and next-activity head.

The detected activity's pooled vector (graph node 0) aggregates its
retrieved neighbors through GCN or GAT layers; a fully connected head
then emits a probability distribution over activity codes. The score of
an activity is the predicted probability of its true code: the lower,
the more anomalous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import graph as graph_ops
from .encoder import (AttentivePooling, AveragePooling, EmbeddingTable,
                      SequenceEncoder)
from .graph import RegWeights
from .ingest import PhInstance, RtInstance

LEAKY_SLOPE = 0.2
DEGREE_CLAMP = 1e-12


class IsolatedNode(ValueError):
    """A GAT node had an empty neighborhood (self-loops were lost)."""


@dataclass(frozen=True)
class ScoredActivity:
    user_id: str
    timestamp: int
    code: int
    probability: float
    label: int
    mode: str


class GcnLayer(nn.Module):
    """x_i' = relu(W sum_j D_ii^-1/2 A_ij D_jj^-1/2 x_j)."""

    def __init__(self, dim):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(dim, dim) / dim**0.5)

    def forward(self, A, X):
        deg = A.sum(dim=-1)
        dinv = deg.clamp_min(DEGREE_CLAMP).rsqrt()
        agg = dinv.unsqueeze(-1) * (A @ (dinv.unsqueeze(-1) * X))
        return F.relu(agg @ self.weight.transpose(-1, -2))


class GatLayer(nn.Module):
    """Single-head graph attention over the nonzero neighborhood of A:
    gamma_ij = softmax_j leaky_relu(C^T [W x_i ; W x_j]), then
    x_i' = relu(W sum_j gamma_ij x_j)."""

    def __init__(self, dim):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(dim, dim) / dim**0.5)
        self.score = nn.Parameter(torch.randn(2 * dim) / dim**0.5)

    def attention(self, A, X):
        neighborhood = A > 0
        if bool((~neighborhood.any(dim=-1)).any()):
            raise IsolatedNode("GAT requires every node to keep a neighbor")
        Wx = X @ self.weight.transpose(-1, -2)
        d = Wx.shape[-1]
        a_self = Wx @ self.score[:d]
        a_peer = Wx @ self.score[d:]
        scores = F.leaky_relu(a_self.unsqueeze(-1) + a_peer.unsqueeze(-2),
                              LEAKY_SLOPE)
        scores = scores.masked_fill(~neighborhood, float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(self, A, X):
        gamma = self.attention(A, X)
        return F.relu((gamma @ X) @ self.weight.transpose(-1, -2))


class PredictionHead(nn.Module):
    """Fully connected projection to the activity-code simplex."""

    def __init__(self, dim, vocab_size):
        super().__init__()
        self.fc = nn.Linear(dim, vocab_size)

    def forward(self, enhanced):
        return self.fc(enhanced)

    def distribution(self, enhanced):
        return torch.softmax(self.fc(enhanced), dim=-1)


class ActivityModel(nn.Module):
    """End-to-end detector: encode -> pool -> retrieve -> graph ->
    enhance -> predict. Ablation letters in the config switch off
    attentive pooling (P), the weighted cosine (S), and the whole graph
    path (G)."""

    def __init__(self, vocab_size, config, mode="rt"):
        super().__init__()
        if mode not in ("rt", "ph"):
            raise ValueError(f"unknown mode {mode!r}")
        config.validate()
        self.config = config
        self.mode = mode
        self.vocab_size = vocab_size
        d = config.hidden_size
        self.embedding = EmbeddingTable(vocab_size, d)
        self.encoder = SequenceEncoder(d, family=config.encoder,
                                       bidirectional=(mode == "ph"),
                                       max_positions=max(4096, config.max_len + 1))
        if config.use_attentive_pooling:
            self.pooling = AttentivePooling(d, heads=config.pooling_heads,
                                            norm=config.attention_norm)
        else:
            self.pooling = AveragePooling()
        self.pool = None
        if config.use_graph:
            if config.use_weighted_cosine:
                self.similarity_weights = nn.Parameter(
                    torch.ones(config.similarity_heads, d)
                    + 0.01 * torch.randn(config.similarity_heads, d))
            else:
                self.register_buffer("similarity_weights", torch.ones(1, d))
            layer_cls = GcnLayer if config.gnn == "gcn" else GatLayer
            self.gnn_layers = nn.ModuleList(
                [layer_cls(d) for _ in range(config.gnn_layers)])
        self.head = PredictionHead(d, vocab_size)
        self.reg_weights = RegWeights(config.mu1, config.mu2, config.mu3)

    def attach_pool(self, pool):
        if not self.config.use_graph:
            raise ValueError("graph path is ablated; no pool to attach")
        self.pool = pool

    def encode_pooled(self, codes, lengths, query_pos):
        """codes: (B, L) long, zero-padded; lengths: (B,);
        query_pos: (B,) index of the query hidden state."""
        emb = self.embedding(codes)
        hidden = self.encoder(emb, lengths)
        mask = (torch.arange(codes.shape[1], device=codes.device)[None, :]
                < lengths[:, None])
        query = hidden[torch.arange(codes.shape[0]), query_pos]
        pooled = self.pooling(hidden, query, mask)
        return pooled, hidden, mask

    def encode_sequences(self, seqs):
        """Pool representations for a list of (codes, query_pos) pairs;
        used to refresh an encoder_cache pool."""
        codes, lengths, qpos = pad_code_batch(
            [s[0] for s in seqs], device=self._device())
        qpos = torch.as_tensor([s[1] for s in seqs], dtype=torch.long,
                               device=codes.device)
        pooled, _, _ = self.encode_pooled(codes, lengths, qpos)
        return pooled

    def build_graph(self, pooled, neighbor_ids):
        neighbors = self.pool.neighbor_vectors(neighbor_ids)
        X = torch.cat([pooled.unsqueeze(1), neighbors], dim=1)
        S = graph_ops.pairwise_similarity(X, self.similarity_weights)
        A = graph_ops.threshold_adjacency(S, self.config.epsilon)
        return X, A

    def enhance(self, A, X):
        """Run the GNN stack; node 0's final representation."""
        out = X
        for layer in self.gnn_layers:
            out = layer(A, out)
        return out[..., 0, :]

    def forward_batch(self, codes, lengths, query_pos):
        """Returns (probs (B, M), reg (B,), pooled, enhanced)."""
        pooled, _, _ = self.encode_pooled(codes, lengths, query_pos)
        B = pooled.shape[0]
        if self.config.use_graph and self.pool is not None and self.config.k >= 1:
            queries = pooled.detach().cpu().to(torch.float64).numpy()
            ids = self.pool.query_topk(queries, self.config.k)
            X, A = self.build_graph(pooled, ids)
            enhanced = self.enhance(A, X)
            if self.config.use_reg:
                reg = graph_ops.graph_reg_loss(
                    A, X, self.reg_weights, n_nodes=X.shape[1],
                    normalize=self.config.normalize_laplacian)
            else:
                reg = torch.zeros(B, dtype=pooled.dtype, device=pooled.device)
        elif self.config.use_graph and self.config.k == 0:
            X = pooled.unsqueeze(1)
            S = graph_ops.pairwise_similarity(X, self.similarity_weights)
            A = graph_ops.threshold_adjacency(S, self.config.epsilon)
            enhanced = self.enhance(A, X)
            if self.config.use_reg:
                reg = graph_ops.graph_reg_loss(
                    A, X, self.reg_weights, n_nodes=1,
                    normalize=self.config.normalize_laplacian)
            else:
                reg = torch.zeros(B, dtype=pooled.dtype, device=pooled.device)
        else:
            enhanced = pooled
            reg = torch.zeros(B, dtype=pooled.dtype, device=pooled.device)
        probs = self.head.distribution(enhanced)
        return probs, reg, pooled, enhanced

    def _device(self):
        return self.embedding.weight.device


def pad_code_batch(code_seqs, device=None):
    """Zero-pad variable-length code tuples; returns (codes, lengths,
    last_positions)."""
    lengths = torch.as_tensor([len(s) for s in code_seqs], dtype=torch.long,
                              device=device)
    L = int(lengths.max())
    codes = torch.zeros(len(code_seqs), L, dtype=torch.long, device=device)
    for i, seq in enumerate(code_seqs):
        codes[i, : len(seq)] = torch.as_tensor(seq, dtype=torch.long)
    return codes, lengths, lengths - 1


def prepare_batch(instances, device=None):
    """Pack instances for forward_batch. Real-time instances query the
    last prefix position; post-hoc instances query the masked position."""
    seqs, qpos = [], []
    for inst in instances:
        if isinstance(inst, RtInstance):
            seqs.append(inst.prefix)
            qpos.append(len(inst.prefix) - 1)
        elif isinstance(inst, PhInstance):
            seqs.append(inst.codes)
            qpos.append(inst.position)
        else:
            raise TypeError(f"unknown instance type {type(inst)!r}")
    codes, lengths, _ = pad_code_batch(seqs, device=device)
    query_pos = torch.as_tensor(qpos, dtype=torch.long, device=codes.device)
    targets = torch.as_tensor([inst.target for inst in instances],
                              dtype=torch.long, device=codes.device)
    labels = torch.as_tensor([inst.label for inst in instances],
                             dtype=torch.long, device=codes.device)
    return codes, lengths, query_pos, targets, labels


def score_instances(model, instances, batch_size=None):
    """Score instances; returns ScoredActivity list in input order.
    ``batch_size=None`` scores one at a time (the real-time contract)."""
    model.eval()
    mode = "real_time" if model.mode == "rt" else "post_hoc"
    out = []
    step = batch_size or 1
    with torch.no_grad():
        for lo in range(0, len(instances), step):
            chunk = instances[lo:lo + step]
            codes, lengths, qpos, targets, _ = prepare_batch(
                chunk, device=model._device())
            probs, _, _, _ = model.forward_batch(codes, lengths, qpos)
            p = probs[torch.arange(len(chunk)), targets]
            for inst, prob in zip(chunk, p.tolist()):
                out.append(ScoredActivity(
                    user_id=inst.user_id,
                    timestamp=inst.timestamp,
                    code=inst.target,
                    probability=float(prob),
                    label=int(inst.label),
                    mode=mode,
                ))
    return out


def score(model, instance):
    """Score a single instance end-to-end."""
    return score_instances(model, [instance])[0]


def export_vectors(model, instances, batch_size=256):
    """Node-0 enhanced vectors for external visualization. Returns a
    dict of arrays (vectors, labels, users, timestamps, codes)."""
    model.eval()
    vecs, labels, users, stamps, codes = [], [], [], [], []
    with torch.no_grad():
        for lo in range(0, len(instances), batch_size):
            chunk = instances[lo:lo + batch_size]
            c, lengths, qpos, _, _ = prepare_batch(chunk, device=model._device())
            _, _, _, enhanced = model.forward_batch(c, lengths, qpos)
            vecs.append(enhanced.cpu().numpy())
            for inst in chunk:
                labels.append(inst.label)
                users.append(inst.user_id)
                stamps.append(inst.timestamp)
                codes.append(inst.target)
    return {
        "vectors": np.concatenate(vecs, axis=0) if vecs else np.zeros((0, 0)),
        "labels": np.asarray(labels, dtype=np.int64),
        "users": np.asarray(users),
        "timestamps": np.asarray(stamps, dtype=np.int64),
        "codes": np.asarray(codes, dtype=np.int64),
    }


def instance_graph(model, instance):
    """The learned (X, A) for one instance, as numpy arrays."""
    if not (model.config.use_graph and model.pool is not None):
        raise ValueError("graph path is disabled for this model")
    model.eval()
    with torch.no_grad():
        codes, lengths, qpos, _, _ = prepare_batch([instance],
                                                   device=model._device())
        pooled, _, _ = model.encode_pooled(codes, lengths, qpos)
        queries = pooled.detach().cpu().to(torch.float64).numpy()
        ids = model.pool.query_topk(queries, model.config.k)
        X, A = model.build_graph(pooled, ids)
    return X[0].cpu().numpy(), A[0].cpu().numpy()


def dump_graph_edges(path, A):
    """Edge list text: one ``i j weight`` line per nonzero entry."""
    with open(path, "w", encoding="utf-8") as fh:
        n = A.shape[0]
        for i in range(n):
            for j in range(n):
                if A[i, j] != 0.0:
                    fh.write(f"{i} {j} {float(A[i, j])!r}\n")
