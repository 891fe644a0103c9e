"""Per-instance activity graph construction and regularization.

The detected activity's pooled vector (node 0) and its retrieved
neighbors are connected by a learned multi-head weighted cosine
similarity; entries below a hard threshold (and all negative entries)
are zeroed with no gradient through the gate. The regularization loss
combines Dirichlet energy (smoothness), a logarithmic barrier on node
degrees (connectivity) and the squared Frobenius norm (sparsity).

All functions accept a leading batch dimension; a single graph is the
unbatched case.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

log = logging.getLogger(__name__)

ZERO_ROW_EPS = 1e-12
LOG_BARRIER_CLAMP = 1e-12
DEGREE_CLAMP = 1e-12


@dataclass(frozen=True)
class RegWeights:
    mu1: float = 0.2
    mu2: float = 0.1
    mu3: float = 0.1


def pairwise_similarity(X, weights):
    """Multi-head weighted cosine similarity.

    S_ij = (1/Z) sum_z cos(x_i * w_z, x_j * w_z), averaged over heads.
    A weighted row with norm < 1e-12 contributes 0 to its cosine terms
    (logged, not fatal). The result is symmetrized bitwise.

    X: (..., n, d); weights: (Z, d). Returns (..., n, n).
    """
    Xw = X.unsqueeze(-3) * weights.unsqueeze(-2)  # (..., Z, n, d)
    norms = Xw.norm(dim=-1, keepdim=True)
    zero_rows = norms < ZERO_ROW_EPS
    if bool(zero_rows.any()):
        log.debug("pairwise_similarity: %d zero weighted rows",
                  int(zero_rows.sum()))
    Xn = Xw / norms.clamp_min(ZERO_ROW_EPS)
    Xn = torch.where(zero_rows, torch.zeros_like(Xn), Xn)
    S = (Xn @ Xn.transpose(-1, -2)).mean(dim=-3)
    return 0.5 * (S + S.transpose(-1, -2))


def threshold_adjacency(S, epsilon):
    """Hard-gate similarities: keep S_ij when S_ij >= epsilon, else 0.
    Negative similarities are always zeroed. The gate passes no
    gradient; kept entries keep their similarity gradient."""
    gate = (S >= epsilon) & (S >= 0)
    return S * gate.to(S.dtype)


def dirichlet_energy(A, X, normalize=True):
    """Graph signal smoothness: (1/2) sum_ij A_ij ||x_i - x_j||^2,
    equal to tr(X^T L X) with L = D - A; with ``normalize`` the
    degree-normalized Laplacian D^-1/2 L D^-1/2 is used instead (degrees
    clamped at 1e-12 before the inverse square root, so zero-degree
    nodes contribute nothing)."""
    deg = A.sum(dim=-1)
    if normalize:
        dinv = deg.clamp_min(DEGREE_CLAMP).rsqrt()
        Y = X * dinv.unsqueeze(-1)
    else:
        Y = X
    # tr(Y^T (D - A) Y) = sum_i deg_i ||y_i||^2 - sum_ij A_ij y_i . y_j
    sq = (Y * Y).sum(dim=-1)
    cross = (A * (Y @ Y.transpose(-1, -2))).sum(dim=(-1, -2))
    return (deg * sq).sum(dim=-1) - cross


def log_barrier(A):
    """Connectivity barrier: -1^T log(A 1 + delta), delta = 1e-12."""
    row_sums = A.sum(dim=-1)
    return -torch.log(row_sums + LOG_BARRIER_CLAMP).sum(dim=-1)


def frobenius_sq(A):
    """Squared Frobenius norm: sum_ij A_ij^2."""
    return (A * A).sum(dim=(-1, -2))


def graph_reg_loss(A, X, weights, n_nodes, normalize=True):
    """Combined regularizer:
    (mu1/n^2) Dirichlet + (mu2/n) log barrier + (mu3/n^2) Frobenius,
    with n the node count."""
    n = float(n_nodes)
    return (
        weights.mu1 / n**2 * dirichlet_energy(A, X, normalize=normalize)
        + weights.mu2 / n * log_barrier(A)
        + weights.mu3 / n**2 * frobenius_sq(A)
    )
