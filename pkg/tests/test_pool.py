import numpy as np
import pytest
import torch

from itdkit.ann import exact_topk
from itdkit.config import RunConfig
from itdkit.ingest import RtInstance
from itdkit.pool import EmptyPool, VectorPool, instance_key
from itdkit.scorer import ActivityModel, prepare_batch
from itdkit.training import hybrid_loss


def rt(prefix, target, label=0, user="U0001", pos=1, ts=0):
    return RtInstance(user_id=user, session_id=f"{user}-s0000", position=pos,
                      prefix=tuple(prefix), target=target, label=label,
                      timestamp=ts)


class TestBuild:
    def test_duplicate_keys_collapse(self):
        instances = [rt([1, 2], 3), rt([1, 2], 3, ts=99, user="U0002")]
        pool = VectorPool.build(instances, dim=8)
        assert len(pool) == 1

    def test_abnormal_not_pooled(self):
        instances = [rt([1, 2], 3), rt([4, 5], 6, label=1)]
        pool = VectorPool.build(instances, dim=8)
        assert len(pool) == 1

    def test_empty_pool_raises(self):
        with pytest.raises(EmptyPool):
            VectorPool.build([rt([1], 2, label=1)], dim=8)

    def test_key_stability_and_order(self):
        instances = [rt([1, 2], 3), rt([2, 3], 4), rt([1, 2], 5)]
        k1 = VectorPool.build(instances, dim=4).keys
        k2 = VectorPool.build(list(instances), dim=4).keys
        assert np.array_equal(k1, k2)
        assert len(k1) == 3

    def test_key_depends_on_target_and_prefix(self):
        assert instance_key(rt([1, 2], 3)) != instance_key(rt([1, 2], 4))
        assert instance_key(rt([1, 2], 3)) != instance_key(rt([2, 1], 3))
        # user and timestamp are not part of the key
        assert instance_key(rt([1, 2], 3)) == instance_key(
            rt([1, 2], 3, user="U0009", ts=777))


class TestIndexAndQuery:
    def test_singleton_pool(self):
        pool = VectorPool([123], dim=8, seed=1)
        ids = pool.query_topk(np.random.default_rng(0).normal(size=(5, 8)), 1)
        assert np.array_equal(ids, np.zeros((5, 1), dtype=np.int64))

    def test_query_equal_to_pool_row_is_self_nearest(self):
        pool = VectorPool(list(range(100)), dim=16, seed=2)
        row = pool.vectors.detach().numpy()[37]
        ids = pool.query_topk(row[None, :], 1)
        assert ids[0, 0] == 37

    def test_k_at_least_pool_size_returns_all(self):
        pool = VectorPool(list(range(5)), dim=8, seed=3)
        ids = pool.query_topk(np.zeros((2, 8)), 9)
        assert sorted(ids[0].tolist()) == [0, 1, 2, 3, 4]

    def test_k_must_be_positive(self):
        pool = VectorPool([1], dim=4)
        with pytest.raises(ValueError):
            pool.query_topk(np.zeros((1, 4)), 0)

    def test_build_deterministic_given_seed(self):
        rng = np.random.default_rng(4)
        queries = rng.normal(size=(20, 16))
        results = []
        for _ in range(2):
            pool = VectorPool(list(range(500)), dim=16, seed=5)
            pool.build_index(m=8, ef_construction=60, ef_search=60, seed=9)
            results.append(pool.query_topk(queries, 5))
        assert np.array_equal(results[0], results[1])

    def test_refresh_counts_and_identical_neighbors(self):
        pool = VectorPool(list(range(200)), dim=8, seed=6)
        pool.build_index(m=8, ef_construction=60, ef_search=60)
        assert pool.rebuild_count == 1
        queries = np.random.default_rng(1).normal(size=(10, 8))
        before = pool.query_topk(queries, 3)
        for _ in range(3):
            pool.refresh()
        assert pool.rebuild_count == 4
        assert np.array_equal(before, pool.query_topk(queries, 3))

    def test_recall_after_drift_refresh(self):
        # vectors drift (as under optimization), index is rebuilt, and
        # recall against brute force must recover
        pool = VectorPool(list(range(2000)), dim=32, seed=7)
        pool.build_index()
        with torch.no_grad():
            pool.vectors += 0.5 * torch.randn(2000, 32)
        pool.refresh()
        vectors = pool.vectors.detach().numpy()
        rng = np.random.default_rng(2)
        hits = total = 0
        for q in rng.normal(size=(100, 32)):
            got = set(pool.query_topk(q[None, :], 15)[0].tolist())
            want = set(exact_topk(vectors, q, 15)[0].tolist())
            hits += len(got & want)
            total += 15
        assert hits / total >= 0.95


class TestGradientFlow:
    def make_model(self, instances):
        cfg = RunConfig(hidden_size=8, pooling_heads=2, similarity_heads=2,
                        k=2, epsilon=0.0, seed=0, ann_m=8,
                        ann_ef_construction=32, ann_ef_search=32, lr=1e-2)
        model = ActivityModel(48, cfg, mode="rt")
        pool = VectorPool.build(instances, dim=8, seed=0)
        model.attach_pool(pool)
        pool.build_index(m=8, ef_construction=32, ef_search=32)
        return model, pool

    def instance_loss(self, model, inst):
        codes, lengths, qpos, targets, _ = prepare_batch([inst])
        probs, reg, _, _ = model.forward_batch(codes, lengths, qpos)
        one_hot = torch.zeros_like(probs)
        one_hot[0, targets[0]] = 1.0
        return hybrid_loss(probs, one_hot, torch.ones(1)) + reg.mean()

    def test_retrieved_rows_update_others_do_not_affect_loss(self):
        torch.manual_seed(0)
        instances = [rt([i, i + 1], i + 2, ts=i) for i in range(6)]
        model, pool = self.make_model(instances)
        inst = instances[0]

        codes, lengths, qpos, _, _ = prepare_batch([inst])
        with torch.no_grad():
            pooled, _, _ = model.encode_pooled(codes, lengths, qpos)
        retrieved = set(pool.query_topk(
            pooled.double().numpy(), model.config.k)[0].tolist())
        not_retrieved = next(i for i in range(len(pool))
                             if i not in retrieved)

        loss = self.instance_loss(model, inst)
        loss.backward()
        grad = pool.vectors.grad
        assert grad is not None
        for row in retrieved:
            assert bool(grad[row].abs().sum() > 0)
        assert bool(grad[not_retrieved].abs().sum() == 0)

        # one plain gradient step moves retrieved rows
        before = pool.vectors.detach().clone()
        with torch.no_grad():
            pool.vectors -= 0.1 * grad
        for row in retrieved:
            assert not torch.equal(before[row], pool.vectors[row])

        # perturbing a non-retrieved row leaves the instance loss unchanged
        base = float(self.instance_loss(model, inst).detach())
        with torch.no_grad():
            pool.vectors[not_retrieved] += 10.0
        perturbed = float(self.instance_loss(model, inst).detach())
        assert base == perturbed

    def test_cache_mode_vectors_not_trainable(self):
        instances = [rt([i, i + 1], i + 2) for i in range(4)]
        pool = VectorPool.build(instances, dim=8, mode="encoder_cache")
        assert not pool.vectors.requires_grad
        assert pool.sequences is not None and len(pool.sequences) == 4

    def test_cache_mode_refresh_reencodes(self):
        torch.manual_seed(1)
        instances = [rt([i, i + 1], i + 2) for i in range(4)]
        cfg = RunConfig(hidden_size=8, pooling_heads=2, k=2, seed=0)
        model = ActivityModel(48, cfg, mode="rt")
        pool = VectorPool.build(instances, dim=8, mode="encoder_cache")
        model.attach_pool(pool)
        pool._index_params = dict(metric="cosine", m=8, ef_construction=16,
                                  ef_search=16, seed=0)
        before = pool.vectors.clone()
        pool.refresh(model.encode_sequences)
        assert not torch.allclose(before, pool.vectors)
        expected = model.encode_sequences(
            [(inst.prefix + (inst.target,), len(inst.prefix)) for inst in instances])
        assert torch.allclose(pool.vectors, expected, atol=1e-6)
