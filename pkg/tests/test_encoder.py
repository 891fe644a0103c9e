import numpy as np
import pytest
import torch

from itdkit.encoder import (AttentivePooling, AveragePooling, CodeOutOfRange,
                            DegenerateNormalization, EmbeddingTable,
                            SequenceEncoder)

from gradcheck import check_gradients


class TestEmbedding:
    def test_lookup_determinism(self):
        table = EmbeddingTable(10, 8)
        out = table(torch.tensor([0, 0]))
        assert torch.equal(out[0], out[1])
        assert torch.equal(out[0], table.weight[0])

    def test_permutation(self):
        table = EmbeddingTable(10, 8)
        codes = torch.tensor([3, 1, 4])
        perm = torch.tensor([2, 0, 1])
        assert torch.equal(table(codes)[perm], table(codes[perm]))

    def test_out_of_range(self):
        table = EmbeddingTable(10, 8)
        with pytest.raises(CodeOutOfRange):
            table(torch.tensor([10]))
        with pytest.raises(CodeOutOfRange):
            table(torch.tensor([-1]))


class TestSequenceEncoder:
    @pytest.mark.parametrize("n", [1, 5, 100])
    @pytest.mark.parametrize("family", ["rnn", "gru", "lstm", "attention"])
    def test_output_shape(self, family, n):
        enc = SequenceEncoder(16, family=family)
        emb = torch.randn(2, n, 16)
        out = enc(emb, torch.tensor([n, max(1, n - 1)]))
        assert out.shape == (2, n, 16)

    @pytest.mark.parametrize("family", ["rnn", "gru", "lstm", "attention"])
    def test_causality_bitwise(self, family):
        torch.manual_seed(1)
        enc = SequenceEncoder(16, family=family)
        emb = torch.randn(1, 6, 16)
        h_full = enc(emb, torch.tensor([6]))
        extended = torch.cat([emb, torch.randn(1, 1, 16)], dim=1)
        h_ext = enc(extended, torch.tensor([7]))
        assert torch.equal(h_full[0, :6], h_ext[0, :6])

    @pytest.mark.parametrize("family", ["rnn", "gru", "lstm"])
    def test_zero_parameters_zero_states(self, family):
        enc = SequenceEncoder(8, family=family)
        with torch.no_grad():
            for p in enc.parameters():
                p.zero_()
        out = enc(torch.randn(3, 5, 8), torch.tensor([5, 5, 2]))
        assert torch.equal(out, torch.zeros_like(out))

    def test_bidirectional_uses_right_context(self):
        enc = SequenceEncoder(16, family="lstm", bidirectional=True)
        emb = torch.randn(1, 6, 16)
        h1 = enc(emb, torch.tensor([6]))
        emb2 = emb.clone()
        emb2[0, 5] += 1.0
        h2 = enc(emb2, torch.tensor([6]))
        assert not torch.allclose(h1[0, 0], h2[0, 0])

    def test_determinism(self):
        torch.manual_seed(2)
        enc = SequenceEncoder(16, family="lstm")
        emb = torch.randn(2, 4, 16)
        lengths = torch.tensor([4, 3])
        assert torch.equal(enc(emb, lengths), enc(emb, lengths))


class TestAttentivePooling:
    def test_single_position_weight_is_one(self):
        torch.manual_seed(0)
        pool = AttentivePooling(8, heads=2)
        H = torch.randn(1, 1, 8)
        out = pool(H, H[:, 0])
        # weight over one element must be 1: output is W^O applied to the
        # concatenated per-head projected value
        v = torch.einsum("bld,hdk->bhlk", H, pool.w_value)[:, :, 0]
        expected = v.reshape(1, -1) @ pool.w_out
        assert torch.allclose(out, expected, atol=1e-6)

    def test_identical_values_score_independent(self):
        # rows differ only along e0, value projection ignores e0, so
        # values are identical while scores are not: the convex mix under
        # softmax must equal W^O of that shared value
        d = 4
        pool = AttentivePooling(d, heads=1)
        with torch.no_grad():
            pool.w_query.copy_(torch.eye(d)[None])
            pool.w_key.copy_(torch.eye(d)[None])
            wv = torch.eye(d)
            wv[0, 0] = 0.0
            pool.w_value.copy_(wv[None])
            pool.w_out.copy_(torch.eye(d))
        base = torch.tensor([[1.0, 2.0, 3.0, 4.0]])
        H = torch.stack([base + torch.tensor([[dx, 0.0, 0.0, 0.0]])
                         for dx in (-1.0, 0.5, 2.0)], dim=1)
        weights = pool.attention_weights(H, H[:, -1])
        assert not torch.allclose(weights, torch.full_like(weights, 1 / 3.0))
        out = pool(H, H[:, -1])
        shared_value = torch.tensor([[0.0, 2.0, 3.0, 4.0]])
        assert torch.allclose(out, shared_value, atol=1e-6)

    def test_uniform_weights_give_column_mean(self):
        d = 4
        pool = AttentivePooling(d, heads=1)
        with torch.no_grad():
            for w in (pool.w_query, pool.w_key, pool.w_value):
                w.copy_(torch.eye(d)[None])
            pool.w_out.copy_(torch.eye(d))
        H = torch.randn(1, 5, d)
        out = pool(H, torch.zeros(1, d))  # zero query -> equal scores
        assert torch.allclose(out, H.mean(dim=1), atol=1e-6)

    @pytest.mark.parametrize("norm", ["softmax", "raw_sum"])
    def test_weights_sum_to_one(self, norm):
        torch.manual_seed(3)
        pool = AttentivePooling(16, heads=4, norm=norm)
        H = torch.randn(3, 7, 16)
        w = pool.attention_weights(H, H[:, -1])
        assert torch.allclose(w.sum(dim=-1), torch.ones(3, 4), atol=1e-6)

    def test_raw_sum_degenerate(self):
        pool = AttentivePooling(4, heads=1, norm="raw_sum")
        with torch.no_grad():
            pool.w_key.zero_()  # all scores exactly zero
        H = torch.randn(1, 3, 4)
        with pytest.raises(DegenerateNormalization):
            pool(H, H[:, -1])

    def test_masked_positions_ignored(self):
        torch.manual_seed(4)
        pool = AttentivePooling(8, heads=2)
        H = torch.randn(1, 5, 8)
        mask = torch.tensor([[True, True, True, False, False]])
        out1 = pool(H, H[:, 2], mask)
        H2 = H.clone()
        H2[0, 3:] = 123.0
        out2 = pool(H2, H2[:, 2], mask)
        assert torch.allclose(out1, out2)

    def test_average_pooling_masked_mean(self):
        pool = AveragePooling()
        H = torch.arange(12.0).reshape(1, 3, 4)
        mask = torch.tensor([[True, True, False]])
        out = pool(H, None, mask)
        assert torch.allclose(out, H[0, :2].mean(0, keepdim=True))


class TestPoolingGradients:
    def test_pooled_output_gradient_matches_finite_differences(self):
        torch.manual_seed(5)
        rng = np.random.default_rng(5)
        table = EmbeddingTable(12, 8).double()
        enc = SequenceEncoder(8, family="lstm").double()
        pool = AttentivePooling(8, heads=2).double()
        codes = torch.tensor([[3, 7, 1, 0, 9]])
        lengths = torch.tensor([5])
        probe = torch.randn(8, dtype=torch.float64)  # fixed linear functional

        def scalar():
            emb = table(codes)
            hidden = enc(emb, lengths)
            pooled = pool(hidden, hidden[:, -1])
            return pooled[0] @ probe

        params = [table.weight, pool.w_query, pool.w_key, pool.w_value,
                  pool.w_out]
        check_gradients(params, scalar, n_coords=20, rng=rng)
