import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import bce_oracle, edge_oracle, iou_oracle
from rmformer.backbone import CoarseOutput
from rmformer.errors import ConfigError, ContractViolation, DimensionError
from rmformer.layers import resize_mask
from rmformer.losses import (BCE_EPS, bce_loss, coarse_loss, edge_ground_truth, iou_loss, stage_loss, total_loss)
from rmformer.refinement import BlockOutput, StageOutput

D = torch.float64


def _square_mask(side, lo, hi):
    m = torch.zeros(side, side, dtype=D)
    m[lo:hi, lo:hi] = 1
    return m


def _stage(gt, sides, gen=None, refined_at=()):
    blocks = []
    for s in sides:
        g = resize_mask(gt[None, None], s)
        ge = edge_ground_truth(g, 2)
        if gen is None:
            p, e = g.clone(), ge.clone()
        else:
            p = torch.rand(g.shape, generator=gen, dtype=D)
            e = torch.rand(g.shape, generator=gen, dtype=D)
        refined = None
        if s in refined_at:
            refined = g.clone() if gen is None else torch.rand(g.shape, generator=gen, dtype=D)
        blocks.append(BlockOutput(s, p, e, refined))
    z = torch.zeros(1)
    return StageOutput(blocks, blocks[-1].p, z, z)


class TestBCE:
    def test_perfect_prediction(self):
        g = _square_mask(8, 2, 6)
        assert bce_loss(g, g).item() <= -math.log(1 - BCE_EPS) * 1.01

    def test_half_everywhere(self):
        assert abs(bce_loss(torch.full((4, 4), 0.5, dtype=D), _square_mask(4, 1, 3)).item() - math.log(2)) < 1e-12

    def test_matches_loop(self, gen):
        p = torch.rand(4, 4, generator=gen, dtype=D)
        g = (torch.rand(4, 4, generator=gen) > 0.5).to(D)
        assert abs(bce_loss(p, g).item() - bce_oracle(p.numpy(), g.numpy())) < 1e-9

    def test_saturated_prediction_is_finite(self):
        g = _square_mask(4, 1, 3)
        assert math.isfinite(bce_loss(1 - g, g).item())

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            bce_loss(torch.zeros(4, 4), torch.zeros(4, 5))


class TestIoU:
    def test_perfect_prediction(self):
        g = _square_mask(8, 2, 6)
        assert 0 <= iou_loss(g, g).item() < 1 / (g.sum().item() + 1)

    @pytest.mark.parametrize("area", [1, 4, 9])
    def test_disjoint_masks(self, area):
        p = torch.zeros(8, 8, dtype=D)
        g = torch.zeros(8, 8, dtype=D)
        p.view(-1)[:area] = 1
        g.view(-1)[-area:] = 1
        assert abs(iou_loss(p, g).item() - (1 - 1 / (2 * area + 1))) < 1e-12

    def test_half_overlap(self):
        p = torch.tensor([[1.0, 1.0], [0.0, 0.0]], dtype=D)
        g = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=D)
        assert abs(iou_oracle(p.numpy(), g.numpy()) - 0.5) < 1e-15
        assert abs(iou_loss(p, g).item() - 0.5) < 1e-15

    def test_matches_loop(self, gen):
        p = torch.rand(6, 6, generator=gen, dtype=D)
        g = (torch.rand(6, 6, generator=gen) > 0.5).to(D)
        assert abs(iou_loss(p, g).item() - iou_oracle(p.numpy(), g.numpy())) < 1e-12

    def test_batch_is_mean_of_maps(self, gen):
        p = torch.rand(3, 1, 5, 5, generator=gen, dtype=D)
        g = (torch.rand(3, 1, 5, 5, generator=gen) > 0.5).to(D)
        want = np.mean([iou_oracle(p[b, 0].numpy(), g[b, 0].numpy()) for b in range(3)])
        assert abs(iou_loss(p, g).item() - want) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            iou_loss(torch.zeros(4, 4), torch.zeros(1, 4, 4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 7))
def test_losses_permutation_invariant_and_nonnegative(seed, side):
    g_ = torch.Generator().manual_seed(seed)
    p = torch.rand(side, side, generator=g_, dtype=D)
    g = (torch.rand(side, side, generator=g_) > 0.5).to(D)
    perm = torch.randperm(side * side, generator=g_)
    pp, gp = p.reshape(-1)[perm].reshape(side, side), g.reshape(-1)[perm].reshape(side, side)
    for fn in (bce_loss, iou_loss):
        a, b = fn(p, g).item(), fn(pp, gp).item()
        assert a >= 0 and math.isfinite(a)
        assert abs(a - b) < 1e-12


class TestEdgeGroundTruth:
    def test_all_zero(self):
        assert torch.count_nonzero(edge_ground_truth(torch.zeros(8, 8), 2)) == 0

    def test_square_ring_width_one(self):
        m = _square_mask(8, 2, 6)
        got = edge_ground_truth(m, 1)
        want = edge_oracle(m.numpy(), 1)
        assert np.array_equal(got.numpy(), want)
        # ring: one pixel inside and one outside the square boundary
        assert want[1:7, 1:7].sum() == 36 - 4 and want[3:5, 3:5].sum() == 0

    @pytest.mark.parametrize("width", [1, 2, 3])
    def test_random_masks_match_loop(self, gen, width):
        m = (torch.rand(12, 12, generator=gen) > 0.6).to(D)
        assert np.array_equal(edge_ground_truth(m, width).numpy(), edge_oracle(m.numpy(), width))

    def test_full_frame_gives_border_band(self):
        e = edge_ground_truth(torch.ones(10, 10), 2)
        assert torch.count_nonzero(e[2:8, 2:8]) == 0
        assert torch.all(e[:2] == 1) and torch.all(e[:, -2:] == 1)

    def test_batched_layout(self, gen):
        m = (torch.rand(2, 1, 8, 8, generator=gen) > 0.5).float()
        e = edge_ground_truth(m, 1)
        assert e.shape == m.shape
        assert torch.equal(e[1, 0], edge_ground_truth(m[1, 0], 1))

    def test_non_binary(self):
        with pytest.raises(ContractViolation):
            edge_ground_truth(torch.full((4, 4), 0.5), 1)

    def test_width_zero(self):
        with pytest.raises(ContractViolation):
            edge_ground_truth(torch.zeros(4, 4), 0)


class TestStageLoss:
    def test_perfect_predictions(self):
        gt = _square_mask(64, 10, 40)
        total, terms = stage_loss(_stage(gt, (16, 32, 64), refined_at=(64,)), gt[None, None])
        assert total.item() < 1e-3
        assert len(terms) == 3 * 4 + 2

    def test_term_count_doubles_with_blocks(self):
        gt = _square_mask(64, 10, 40)
        _, two = stage_loss(_stage(gt, (16, 32)), gt[None, None])
        _, four = stage_loss(_stage(gt, (16, 32, 64, 128)), gt[None, None])
        assert len(four) == 2 * len(two)

    def test_matches_independent_terms(self, gen):
        gt = _square_mask(64, 5, 37)
        stage = _stage(gt, (16, 32, 64), gen, refined_at=(32, 64))
        total, _ = stage_loss(stage, gt[None, None], edge_width=2)
        want = 0.0
        for blk in stage.blocks:
            g = resize_mask(gt[None, None], blk.side)[0, 0].numpy()
            ge = edge_oracle(g, 2)
            pairs = [(blk.p, g), (blk.e, ge)] + ([(blk.refined, g)] if blk.refined is not None else [])
            for p, t in pairs:
                want += bce_oracle(p[0, 0].numpy(), t) + iou_oracle(p[0, 0].numpy(), t)
        assert abs(total.item() - want) < 1e-9

    def test_refined_supervision_can_be_disabled(self, gen):
        gt = _square_mask(32, 4, 20)
        stage = _stage(gt, (16, 32), gen, refined_at=(32,))
        on, t_on = stage_loss(stage, gt[None, None])
        off, t_off = stage_loss(stage, gt[None, None], supervise_refined=False)
        assert len(t_on) == len(t_off) + 2 and on.item() > off.item()

    def test_missing_block_output(self):
        gt = _square_mask(16, 4, 12)
        stage = _stage(gt, (16,))
        stage.blocks[0].e = None
        with pytest.raises(ContractViolation):
            stage_loss(stage, gt[None, None])

    def test_no_blocks(self):
        z = torch.zeros(1)
        with pytest.raises(ContractViolation):
            stage_loss(StageOutput([], z, z, z), torch.zeros(1, 1, 8, 8))


class TestTotalLoss:
    def _results(self, gen):
        gt = _square_mask(64, 8, 44)[None, None]
        g16 = resize_mask(gt, 16)
        coarse = CoarseOutput([], torch.zeros(1), torch.rand(g16.shape, generator=gen, dtype=D),
                              torch.rand(g16.shape, generator=gen, dtype=D))
        s1 = _stage(gt[0, 0], (16, 32), gen)
        s2 = _stage(gt[0, 0], (16, 32, 64), gen)
        return [coarse_loss(coarse, gt), stage_loss(s1, gt, prefix="rrs1"), stage_loss(s2, gt, prefix="rrs2")]

    @pytest.mark.parametrize("weights", [(1, 1, 1), (0, 0, 1), (0.1, 0.5, 1), (0.5, 1, 2)])
    def test_weighted_sum(self, gen, weights):
        results = self._results(gen)
        rep = total_loss(results, weights)
        sums = [s.item() for s, _ in results]
        want = sum(w * s for w, s in zip(weights, sums))
        assert abs(rep.total - want) < 1e-12
        assert abs(rep.total_tensor.item() - want) < 1e-12
        assert list(rep.stage_sums.values()) == sums
        if weights == (0, 0, 1):
            assert rep.total == rep.stage_sums["rrs2"]

    def test_report_fields(self, gen):
        rep = total_loss(self._results(gen))
        assert set(rep.csv_fields()) == {"loss_cps", "loss_rrs1", "loss_rrs2", "total"}
        assert all(v >= 0 and math.isfinite(v) for v in rep.terms.values())
        assert len(rep.terms) == 4 + 8 + 12
        assert rep.first_non_finite() is None

    def test_first_non_finite_names_term(self, gen):
        rep = total_loss(self._results(gen))
        rep.terms["rrs1.32.e.iou"] = float("nan")
        assert rep.first_non_finite()[0] == "rrs1.32.e.iou"

    def test_zero_weight_blocks_gradient(self, gen):
        gt = _square_mask(32, 4, 20)[None, None]
        s1, s2 = _stage(gt[0, 0], (16, 32), gen), _stage(gt[0, 0], (16, 32), gen)
        for blk in s1.blocks + s2.blocks:
            blk.p.requires_grad_(True)
        coarse = CoarseOutput([], torch.zeros(1), s1.blocks[0].p.detach(), s1.blocks[0].e)
        rep = total_loss([coarse_loss(coarse, gt), stage_loss(s1, gt), stage_loss(s2, gt)], (1, 0, 1))
        rep.total_tensor.backward()
        assert torch.count_nonzero(s1.blocks[0].p.grad) == 0
        assert torch.count_nonzero(s2.blocks[0].p.grad) > 0

    @pytest.mark.parametrize("weights", [(-0.1, 1, 1), (1, float("nan"), 1)])
    def test_bad_weights(self, gen, weights):
        with pytest.raises(ConfigError):
            total_loss(self._results(gen), weights)
