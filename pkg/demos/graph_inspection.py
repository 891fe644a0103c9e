"""A look inside one instance's learned activity graph.

Builds an untrained model over a small pool, retrieves neighbors for a
single activity prefix, and walks through the graph construction:
multi-head weighted cosine similarities, hard thresholding, and the
three regularization terms.
"""

import torch

from itdkit.config import RunConfig
from itdkit.graph import (RegWeights, dirichlet_energy, frobenius_sq,
                          graph_reg_loss, log_barrier, pairwise_similarity,
                          threshold_adjacency)
from itdkit.ingest import RtInstance
from itdkit.pool import VectorPool
from itdkit.scorer import ActivityModel, prepare_batch

torch.manual_seed(0)

cfg = RunConfig(hidden_size=16, pooling_heads=2, similarity_heads=4,
                k=5, epsilon=0.3, seed=0)
model = ActivityModel(vocab_size=168, config=cfg, mode="rt")

# a pool of 40 synthetic "past activity" vectors
instances = [RtInstance("U0001", "s0", i + 1, (i, i + 1), i + 2, 0, i)
             for i in range(40)]
pool = VectorPool.build(instances, dim=16, seed=0)
model.attach_pool(pool)
pool.build_index(m=8, ef_construction=40, ef_search=40)
print(f"pool: {len(pool)} deduplicated normal activities")

# the activity under detection: codes 3, 20, 45 followed by target 66
inst = RtInstance("U0002", "s1", 3, (3, 20, 45), 66, 0, 999)
codes, lengths, qpos, _, _ = prepare_batch([inst])
with torch.no_grad():
    pooled, _, _ = model.encode_pooled(codes, lengths, qpos)
    ids = pool.query_topk(pooled.double().numpy(), cfg.k)
    print(f"retrieved neighbor rows: {ids[0].tolist()}")

    # node 0 is the detected activity, rows 1..k its neighbors
    X = torch.cat([pooled.unsqueeze(1), pool.neighbor_vectors(ids)], dim=1)[0]
    S = pairwise_similarity(X, model.similarity_weights)
    A = threshold_adjacency(S, cfg.epsilon)

print(f"\nsimilarities S (head count {cfg.similarity_heads}):")
print(S.numpy().round(3))
print(f"\nadjacency A after hard threshold {cfg.epsilon} "
      f"(negatives always dropped):")
print(A.numpy().round(3))
kept = int((A != 0).sum())
print(f"{kept} of {A.numel()} entries survive; diagonal stays 1 "
      f"(self-similarity)")

weights = RegWeights(cfg.mu1, cfg.mu2, cfg.mu3)
n = X.shape[0]
print(f"\nregularizers over the {n}-node graph:")
print(f"  Dirichlet energy (smoothness)  {dirichlet_energy(A, X).item():.4f}")
print(f"  log barrier (connectivity)     {log_barrier(A).item():.4f}")
print(f"  Frobenius^2 (sparsity)         {frobenius_sq(A).item():.4f}")
print(f"  combined loss (mu={cfg.mu1},{cfg.mu2},{cfg.mu3})  "
      f"{graph_reg_loss(A, X, weights, n).item():.4f}")

# raising the threshold only removes edges, never adds them
for eps in (0.0, 0.3, 0.6, 0.9):
    nnz = int((threshold_adjacency(S, eps) != 0).sum())
    print(f"  epsilon={eps:.1f}: {nnz} nonzero entries")
