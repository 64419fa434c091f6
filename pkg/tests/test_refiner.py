import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import gather_oracle, scatter_oracle, top_k_oracle
from rmformer.errors import ContractViolation, DimensionError
from rmformer.refiner import (GlobalBranch, PixelRefiner, SelfAttention, absdiff_guide, default_k, gather_pixels,
                              scatter_refine, select_top_k)

D = torch.float64


def _randomize(module, gen, scale=0.3):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


class TestSelectTopK:
    def test_two_largest(self):
        guide = torch.tensor([[0.1, 0.9], [0.5, 0.9]])
        assert sorted(select_top_k(guide, 2).tolist()) == [1, 3]

    def test_constant_guide_picks_lowest_indices(self):
        assert select_top_k(torch.full((4, 4), 0.3), 3).tolist() == [0, 1, 2]

    def test_random_guide_matches_sort_oracle(self, gen):
        guide = torch.rand(16, 16, generator=gen)
        assert select_top_k(guide, 20).tolist() == top_k_oracle(guide.numpy(), 20)

    @settings(max_examples=60, deadline=None)
    @given(vals=st.lists(st.integers(0, 4), min_size=1, max_size=40), data=st.data())
    def test_ties_match_oracle(self, vals, data):
        k = data.draw(st.integers(0, len(vals)))
        guide = torch.tensor(vals, dtype=torch.float32).reshape(1, 1, 1, -1)
        assert select_top_k(guide, k)[0].tolist() == top_k_oracle(np.array(vals), k)

    def test_batched(self, gen):
        guide = torch.rand(3, 1, 8, 8, generator=gen)
        idx = select_top_k(guide, 5)
        assert idx.shape == (3, 5)
        for b in range(3):
            assert idx[b].tolist() == top_k_oracle(guide[b].numpy(), 5)

    @pytest.mark.parametrize("k", [-1, 17])
    def test_out_of_range(self, k):
        with pytest.raises(ContractViolation):
            select_top_k(torch.rand(4, 4), k)

    def test_indices_distinct_and_in_range(self, gen):
        idx = select_top_k(torch.rand(2, 1, 8, 8, generator=gen), 30)
        for row in idx.tolist():
            assert len(set(row)) == 30 and all(0 <= i < 64 for i in row)

    def test_default_k(self):
        assert default_k(64, 64) == 256
        assert default_k(128, 128) == 512


class TestGatherScatter:
    def test_identity_gather(self, gen):
        feat = torch.randn(1, 5, 4, 4, generator=gen)
        rows = gather_pixels(feat, torch.arange(16)[None])
        assert torch.equal(rows[0], feat[0].reshape(5, 16).T)

    def test_single_row(self, gen):
        feat = torch.randn(1, 5, 4, 4, generator=gen)
        rows = gather_pixels(feat, torch.tensor([[6]]))
        assert torch.equal(rows[0, 0], feat[0, :, 1, 2])

    def test_gather_matches_loop(self, gen):
        feat = torch.randn(2, 7, 8, 8, generator=gen)
        idx = torch.stack([torch.randperm(64, generator=gen)[:13] for _ in range(2)])
        rows = gather_pixels(feat, idx)
        for b in range(2):
            assert np.array_equal(rows[b].numpy(), gather_oracle(feat[b].numpy(), idx[b].tolist()))

    def test_gather_shape_errors(self):
        with pytest.raises(DimensionError):
            gather_pixels(torch.zeros(2, 3, 4, 4), torch.zeros(1, 2, dtype=torch.long))
        with pytest.raises(DimensionError):
            gather_pixels(torch.zeros(1, 3, 4, 4), torch.tensor([[16]]))

    def test_round_trip_is_identity(self, gen):
        base = torch.rand(2, 1, 8, 8, generator=gen)
        idx = select_top_k(torch.rand(2, 1, 8, 8, generator=gen), 10)
        assert torch.equal(scatter_refine(base, gather_pixels(base, idx), idx), base)

    def test_full_overwrite(self, gen):
        vals = torch.rand(1, 16, 1, generator=gen)
        out = scatter_refine(torch.zeros(1, 1, 4, 4), vals, torch.arange(16)[None])
        assert torch.equal(out, vals.reshape(1, 1, 4, 4))

    def test_scatter_matches_loop(self, gen):
        base = torch.rand(1, 1, 8, 8, generator=gen)
        idx = torch.randperm(64, generator=gen)[:20][None]
        vals = torch.rand(1, 20, 1, generator=gen)
        out = scatter_refine(base, vals, idx)
        want = scatter_oracle(base[0, 0].numpy(), vals[0, :, 0].numpy(), idx[0].tolist())
        assert np.array_equal(out[0, 0].numpy(), want)

    def test_scatter_does_not_mutate_base(self, gen):
        base = torch.rand(1, 1, 4, 4, generator=gen)
        keep = base.clone()
        scatter_refine(base, torch.ones(1, 3, 1), torch.tensor([[0, 1, 2]]))
        assert torch.equal(base, keep)

    def test_row_count_mismatch(self):
        with pytest.raises(ContractViolation):
            scatter_refine(torch.zeros(1, 1, 4, 4), torch.zeros(1, 3, 1), torch.tensor([[0, 1]]))


class TestGlobalBranch:
    def test_token_count(self):
        assert GlobalBranch(4, 8)(torch.rand(2, 4, 64, 64)).shape == (2, 64, 8)

    def test_zero_input_zero_weights(self):
        m = GlobalBranch(4, 8)
        with torch.no_grad():
            for p in m.attn.parameters():
                p.zero_()
        assert torch.count_nonzero(m(torch.zeros(2, 4, 16, 16))) == 0

    def test_attention_rows_are_convex(self, gen):
        attn = _randomize(SelfAttention(8).to(D), gen)
        w = attn.weights(torch.randn(2, 10, 8, generator=gen, dtype=D))
        assert torch.all(w >= 0)
        assert (w.sum(-1) - 1).abs().max() < 1e-6

    def test_side_not_divisible_by_8(self):
        with pytest.raises(DimensionError):
            GlobalBranch(4, 8)(torch.rand(1, 4, 20, 20))


class TestRefinerMaths:
    def _refiner(self, gen):
        return _randomize(PixelRefiner(6, 5, 6, 3, 8, k=7).to(D), gen)

    def test_similarity_zero_operands(self):
        m = PixelRefiner(6, 5, 6, 3, 8)
        with torch.no_grad():
            m.w_q.bias.zero_()
            m.w_k.bias.zero_()
        s = m.similarity(torch.zeros(1, 4, 6), torch.zeros(1, 3, 8))
        assert s.shape == (1, 4, 3) and torch.all(s == 0.5)

    def test_similarity_scalar_case(self, gen):
        m = self._refiner(gen)
        pi, po = torch.randn(1, 1, 6, generator=gen, dtype=D), torch.randn(1, 1, 8, generator=gen, dtype=D)
        q = m.w_q(pi)[0, 0]
        k = m.w_k(po)[0, 0]
        assert torch.allclose(m.similarity(pi, po)[0, 0, 0], torch.sigmoid((q * k).sum()), atol=0, rtol=1e-12)

    def test_similarity_matches_dense(self, gen):
        m = self._refiner(gen)
        pi, po = torch.randn(2, 7, 6, generator=gen, dtype=D), torch.randn(2, 4, 8, generator=gen, dtype=D)
        wq, bq = m.w_q.weight.detach().numpy(), m.w_q.bias.detach().numpy()
        wk, bk = m.w_k.weight.detach().numpy(), m.w_k.bias.detach().numpy()
        for b in range(2):
            q = pi[b].numpy() @ wq.T + bq
            k = po[b].numpy() @ wk.T + bk
            want = 1 / (1 + np.exp(-(q @ k.T)))
            got = m.similarity(pi, po)[b].detach().numpy()
            assert np.max(np.abs(got - want)) < 1e-6
            assert np.all((got > 0) & (got < 1))

    def test_similarity_dim_mismatch(self, gen):
        with pytest.raises(DimensionError):
            self._refiner(gen).similarity(torch.zeros(1, 3, 5, dtype=D), torch.zeros(1, 2, 8, dtype=D))

    def test_reproject_zero_similarity(self, gen):
        m = self._refiner(gen)
        with torch.no_grad():
            out = m.reproject(torch.zeros(1, 5, 4, dtype=D), torch.randn(1, 4, 8, generator=gen, dtype=D))
        assert torch.count_nonzero(out) == 0

    def test_reproject_one_hot_copies_rows(self, gen):
        m = PixelRefiner(6, 5, 6, 3, 8).to(D)
        with torch.no_grad():
            m.w_v.weight.copy_(torch.eye(8, dtype=D))
            m.w_v.bias.zero_()
        po = torch.randn(1, 4, 8, generator=gen, dtype=D)
        s = torch.zeros(1, 3, 4, dtype=D)
        s[0, 0, 2] = s[0, 1, 0] = s[0, 2, 3] = 1
        out = m.reproject(s, po)
        assert torch.equal(out[0], po[0, [2, 0, 3]])

    def test_reproject_matches_matmul(self, gen):
        m = self._refiner(gen)
        s, po = torch.rand(2, 7, 4, generator=gen, dtype=D), torch.randn(2, 4, 8, generator=gen, dtype=D)
        wv, bv = m.w_v.weight.detach().numpy(), m.w_v.bias.detach().numpy()
        for b in range(2):
            want = s[b].numpy() @ (po[b].numpy() @ wv.T + bv)
            assert np.max(np.abs(m.reproject(s, po)[b].detach().numpy() - want)) < 1e-6

    def test_reproject_mismatch(self, gen):
        with pytest.raises(DimensionError):
            self._refiner(gen).reproject(torch.zeros(1, 3, 5, dtype=D), torch.zeros(1, 4, 8, dtype=D))

    def test_repredict_zero_gives_half(self):
        m = PixelRefiner(6, 5, 6, 3, 8)
        with torch.no_grad():
            for p in list(m.fc1.parameters()) + list(m.fc2.parameters()):
                p.zero_()
        out = m.repredict(torch.zeros(1, 9, 8), torch.zeros(1, 9, 5))
        assert out.shape == (1, 9, 1) and torch.all(out == 0.5)

    def test_repredict_matches_composition(self, gen):
        m = self._refiner(gen)
        t, pf = torch.randn(2, 7, 8, generator=gen, dtype=D), torch.randn(2, 7, 5, generator=gen, dtype=D)
        w1, b1 = m.fc1.weight.detach().numpy(), m.fc1.bias.detach().numpy()
        w2, b2 = m.fc2.weight.detach().numpy(), m.fc2.bias.detach().numpy()
        for b in range(2):
            z = (t[b].numpy() @ w1.T + b1 + pf[b].numpy()) @ w2.T + b2
            want = 1 / (1 + np.exp(-z))
            assert np.max(np.abs(m.repredict(t, pf)[b].detach().numpy() - want)) < 1e-6

    def test_repredict_mismatch(self, gen):
        with pytest.raises(DimensionError):
            self._refiner(gen).repredict(torch.zeros(1, 3, 8, dtype=D), torch.zeros(1, 3, 4, dtype=D))


class TestPixelRefiner:
    def _inputs(self, gen, side=16):
        return dict(
            g_i=torch.randn(2, 6, side, side, generator=gen, dtype=D),
            f_i=torch.randn(2, 5, side, side, generator=gen, dtype=D),
            guide=torch.rand(2, 1, side, side, generator=gen, dtype=D),
            base_pred=torch.rand(2, 1, side, side, generator=gen, dtype=D),
            g_deep=torch.randn(2, 6, 16, 16, generator=gen, dtype=D),
            f_deep=torch.randn(2, 3, 16, 16, generator=gen, dtype=D),
        )

    def test_zero_k_returns_base(self, gen):
        m = _randomize(PixelRefiner(6, 5, 6, 3, 8, k=0).to(D), gen)
        x = self._inputs(gen)
        out, idx = m(**x)
        assert idx.shape == (2, 0) and torch.equal(out, x["base_pred"])

    def test_changes_only_selected_pixels(self, gen):
        m = _randomize(PixelRefiner(6, 5, 6, 3, 8, k=20).to(D), gen).eval()
        x = self._inputs(gen)
        with torch.no_grad():
            out, idx = m(**x)
        for b in range(2):
            changed = (out[b] != x["base_pred"][b]).reshape(-1).nonzero().flatten().tolist()
            assert set(changed) <= set(idx[b].tolist())
            rest = torch.ones(256, dtype=torch.bool)
            rest[idx[b]] = False
            assert torch.equal(out[b].reshape(-1)[rest], x["base_pred"][b].reshape(-1)[rest])
        assert out.min() >= 0 and out.max() <= 1

    def test_selected_values_are_repredictions(self, gen):
        m = _randomize(PixelRefiner(6, 5, 6, 3, 8, k=9).to(D), gen).eval()
        x = self._inputs(gen)
        with torch.no_grad():
            out, idx = m(**x)
            po_conv, po_f = m.global_features(x["g_deep"], x["f_deep"])
            s = m.similarity(gather_pixels(x["g_i"], idx), po_conv)
            want = m.repredict(m.reproject(s, po_f), gather_pixels(x["f_i"], idx))
        assert torch.equal(gather_pixels(out, idx), want)

    def test_unselected_features_have_no_influence(self, gen):
        m = _randomize(PixelRefiner(6, 5, 6, 3, 8, k=12).to(D), gen).eval()
        x = self._inputs(gen)
        with torch.no_grad():
            out, idx = m(**x)
            free = [i for i in range(256) if i not in set(idx[0].tolist())][:5]
            for i in free:
                y, xx = divmod(i, 16)
                for name in ("g_i", "f_i"):
                    bumped = dict(x)
                    bumped[name] = x[name].clone()
                    bumped[name][0, :, y, xx] += 1e-3
                    assert torch.equal(m(**bumped)[0], out)

    def test_absdiff_guide_uniform_half(self):
        guide = absdiff_guide(torch.full((1, 1, 4, 4), 0.5))
        assert torch.count_nonzero(guide) == 0
        assert select_top_k(guide, 3)[0].tolist() == [0, 1, 2]

    def test_spatial_mismatch(self, gen):
        m = PixelRefiner(6, 5, 6, 3, 8, k=4).to(D)
        x = self._inputs(gen)
        x["guide"] = torch.rand(2, 1, 8, 8, dtype=D)
        with pytest.raises(DimensionError, match="guide"):
            m(**x)

    def test_resolve_k(self):
        assert PixelRefiner(6, 5, 6, 3, 8).resolve_k(16, 16) == 64
        assert PixelRefiner(6, 5, 6, 3, 8, k=1000).resolve_k(16, 16) == 256
