"""Activity sequence modeling: embedding, sequence encoding, pooling.

An activity-code sequence is embedded, run through a sequence encoder
(simple RNN, GRU, LSTM, or self-attention; causal for real-time mode,
bidirectional for post-hoc cloze mode) and pooled into one vector by
multi-head attentive pooling conditioned on a query hidden state: the
last position's state in real-time mode, the masked position's state in
post-hoc mode.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

ENCODER_FAMILIES = ("rnn", "gru", "lstm", "attention")


class CodeOutOfRange(IndexError):
    """An activity code is outside the embedding table's vocabulary."""


class DegenerateNormalization(FloatingPointError):
    """Raw-sum attention normalization hit a near-zero score sum."""


class EmbeddingTable(nn.Module):
    """Vocabulary-size x hidden-size lookup table for activity codes."""

    def __init__(self, vocab_size, dim):
        super().__init__()
        self.vocab_size = vocab_size
        self.dim = dim
        self.weight = nn.Parameter(torch.randn(vocab_size, dim))

    def forward(self, codes):
        if codes.numel() and (codes.min() < 0 or codes.max() >= self.vocab_size):
            raise CodeOutOfRange(
                f"codes must lie in [0, {self.vocab_size}), got "
                f"[{int(codes.min())}, {int(codes.max())}]"
            )
        return self.weight[codes]


class SequenceEncoder(nn.Module):
    """Maps embedded sequences to hidden states of the same width.

    Forward direction is causal: position t depends only on positions
    <= t. Bidirectional variants (post-hoc mode only) run half-width
    recurrences in each direction and concatenate back to ``dim``.
    """

    def __init__(self, dim, family="lstm", bidirectional=False,
                 attention_heads=4, attention_layers=2, max_positions=4096):
        super().__init__()
        if family not in ENCODER_FAMILIES:
            raise ValueError(f"unknown encoder family {family!r}")
        self.dim = dim
        self.family = family
        self.bidirectional = bidirectional
        if family == "attention":
            self.attn = _SelfAttentionEncoder(
                dim, heads=attention_heads, layers=attention_layers,
                causal=not bidirectional, max_positions=max_positions)
        else:
            hidden = dim // 2 if bidirectional else dim
            if bidirectional and dim % 2:
                raise ValueError("bidirectional encoding needs an even dim")
            cls = {"rnn": nn.RNN, "gru": nn.GRU, "lstm": nn.LSTM}[family]
            self.rnn = cls(dim, hidden, batch_first=True,
                           bidirectional=bidirectional)

    def forward(self, emb, lengths):
        """emb: (B, L, d); lengths: (B,) true lengths. Returns (B, L, d);
        rows at padded positions are zero."""
        if self.family == "attention":
            return self.attn(emb, lengths)
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True,
                                      enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True,
                                     total_length=emb.shape[1])
        return out


class _SelfAttentionEncoder(nn.Module):
    """Minimal pre-norm transformer stack with learned positions."""

    def __init__(self, dim, heads=4, layers=2, causal=True, max_positions=4096):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by attention heads")
        self.causal = causal
        self.heads = heads
        self.pos = nn.Parameter(torch.randn(max_positions, dim) * 0.02)
        self.blocks = nn.ModuleList()
        for _ in range(layers):
            self.blocks.append(nn.ModuleDict({
                "ln1": nn.LayerNorm(dim),
                "qkv": nn.Linear(dim, 3 * dim),
                "proj": nn.Linear(dim, dim),
                "ln2": nn.LayerNorm(dim),
                "ff1": nn.Linear(dim, 2 * dim),
                "ff2": nn.Linear(2 * dim, dim),
            }))

    def forward(self, emb, lengths):
        B, L, d = emb.shape
        h = self.heads
        x = emb + self.pos[:L]
        pad = torch.arange(L, device=emb.device)[None, :] >= lengths[:, None]
        for blk in self.blocks:
            y = blk["ln1"](x)
            q, k, v = blk["qkv"](y).chunk(3, dim=-1)
            q = q.view(B, L, h, d // h).transpose(1, 2)
            k = k.view(B, L, h, d // h).transpose(1, 2)
            v = v.view(B, L, h, d // h).transpose(1, 2)
            scores = (q @ k.transpose(-1, -2)) / math.sqrt(d // h)
            scores = scores.masked_fill(pad[:, None, None, :], float("-inf"))
            if self.causal:
                causal = torch.triu(torch.ones(L, L, dtype=torch.bool,
                                               device=emb.device), 1)
                scores = scores.masked_fill(causal, float("-inf"))
            att = torch.softmax(scores, dim=-1)
            out = (att @ v).transpose(1, 2).reshape(B, L, d)
            x = x + blk["proj"](out)
            y = blk["ln2"](x)
            x = x + blk["ff2"](F.relu(blk["ff1"](y)))
        return x.masked_fill(pad[:, :, None], 0.0)


class AttentivePooling(nn.Module):
    """Multi-head attentive pooling of hidden states under a query.

    Per head, scores are scaled dot products q.K/sqrt(d_k); aggregation
    weights are softmax-normalized scores by default, or the literal
    raw-sum normalization (score / sum of scores) when
    ``norm="raw_sum"``, which raises DegenerateNormalization if a head's
    score sum is within 1e-8 of zero.
    """

    def __init__(self, dim, heads=8, norm="softmax"):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by the head count")
        if norm not in ("softmax", "raw_sum"):
            raise ValueError(f"unknown attention norm {norm!r}")
        self.dim = dim
        self.heads = heads
        self.d_k = dim // heads
        self.norm = norm
        scale = 1.0 / math.sqrt(dim)
        self.w_query = nn.Parameter(torch.randn(heads, dim, self.d_k) * scale)
        self.w_key = nn.Parameter(torch.randn(heads, dim, self.d_k) * scale)
        self.w_value = nn.Parameter(torch.randn(heads, dim, self.d_k) * scale)
        self.w_out = nn.Parameter(torch.randn(heads * self.d_k, dim) * scale)

    def attention_weights(self, hidden, query, mask=None):
        """Per-head aggregation weights, shape (B, heads, L)."""
        q = torch.einsum("bd,hdk->bhk", query, self.w_query)
        k = torch.einsum("bld,hdk->bhlk", hidden, self.w_key)
        scores = torch.einsum("bhk,bhlk->bhl", q, k) / math.sqrt(self.d_k)
        if self.norm == "softmax":
            if mask is not None:
                scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
            return torch.softmax(scores, dim=-1)
        if mask is not None:
            scores = scores * mask[:, None, :].to(scores.dtype)
        denom = scores.sum(dim=-1, keepdim=True)
        if bool((denom.abs() < 1e-8).any()):
            raise DegenerateNormalization(
                "attention score sum below 1e-8; use softmax normalization")
        return scores / denom

    def forward(self, hidden, query, mask=None):
        """hidden: (B, L, d); query: (B, d); mask: (B, L) True = valid."""
        weights = self.attention_weights(hidden, query, mask)
        v = torch.einsum("bld,hdk->bhlk", hidden, self.w_value)
        pooled = torch.einsum("bhl,bhlk->bhk", weights, v)
        pooled = pooled.reshape(hidden.shape[0], self.heads * self.d_k)
        return pooled @ self.w_out


class AveragePooling(nn.Module):
    """Pooling-ablation fallback: masked mean over hidden states."""

    def forward(self, hidden, query, mask=None):
        if mask is None:
            return hidden.mean(dim=1)
        m = mask.to(hidden.dtype)[:, :, None]
        return (hidden * m).sum(dim=1) / m.sum(dim=1).clamp_min(1.0)
