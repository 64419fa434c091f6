"""BCE + soft-IoU deep supervision and the weighted total loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractViolation, DimensionError
from .layers import resize_mask

BCE_EPS = 1e-7
IOU_EPS = 1.0
STAGE_NAMES = ("cps", "rrs1", "rrs2")


def _same_shape(p, g):
    if p.shape != g.shape:
        raise DimensionError(f"prediction {tuple(p.shape)} and target {tuple(g.shape)} differ in shape")


def bce_loss(p, g):
    _same_shape(p, g)
    p = p.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(g * torch.log(p) + (1 - g) * torch.log(1 - p)).mean()


def iou_loss(p, g):
    """Soft IoU, computed per map over the last two axes, then averaged over leading axes."""
    _same_shape(p, g)
    inter = (p * g).sum(dim=(-2, -1))
    union = (p + g - p * g).sum(dim=(-2, -1))
    return (1 - (inter + IOU_EPS) / (union + IOU_EPS)).mean()


def output_loss(p, g):
    return bce_loss(p, g) + iou_loss(p, g)


def edge_ground_truth(mask, width=2):
    """Morphological gradient (square structuring element of radius ``width``).

    Pixels outside the frame count as background for both dilation and erosion, so a
    full-frame mask yields a band along the border.
    """
    if width < 1:
        raise ContractViolation(f"edge width must be >= 1, got {width}")
    if not torch.all((mask == 0) | (mask == 1)):
        raise ContractViolation("edge ground truth needs a binary mask")
    squeeze = mask.dim() == 2
    m = mask[None, None] if squeeze else mask
    k = 2 * width + 1
    dil = F.max_pool2d(m, k, stride=1, padding=width)
    ero = 1 - F.max_pool2d(F.pad(1 - m, (width,) * 4, value=1.0), k, stride=1)
    edge = (dil - ero).clamp(0, 1)
    return edge[0, 0] if squeeze else edge


@dataclass
class LossReport:
    terms: Dict[str, float]
    stage_sums: Dict[str, float]
    total: float
    weights: tuple
    total_tensor: torch.Tensor = field(default=None, repr=False)

    def csv_fields(self):
        return {**{f"loss_{k}": v for k, v in self.stage_sums.items()}, "total": self.total}

    def first_non_finite(self):
        for name, value in {**self.terms, **self.stage_sums, "total": self.total}.items():
            if not math.isfinite(value):
                return name, value
        return None


def stage_targets(gt_mask, side, edge_width):
    g = resize_mask(gt_mask, side)
    return g, edge_ground_truth(g, edge_width)


def coarse_loss(coarse, gt_mask, edge_width=2, prefix="cps"):
    g, ge = stage_targets(gt_mask, coarse.p.shape[-1], edge_width)
    terms = {
        f"{prefix}.p.bce": bce_loss(coarse.p, g), f"{prefix}.p.iou": iou_loss(coarse.p, g),
        f"{prefix}.e.bce": bce_loss(coarse.e, ge), f"{prefix}.e.iou": iou_loss(coarse.e, ge),
    }
    return sum(terms.values()), terms


def stage_loss(stage, gt_mask, edge_width=2, supervise_refined=True, prefix="rrs"):
    """Sum over decoder blocks of BCE + IoU on the region and edge maps (and refined maps)."""
    if not stage.blocks:
        raise ContractViolation("stage output has no decoder blocks")
    terms = {}
    for blk in stage.blocks:
        if blk.p is None or blk.e is None:
            raise ContractViolation(f"decoder block at side {blk.side} is missing an output")
        g, ge = stage_targets(gt_mask, blk.side, edge_width)
        tag = f"{prefix}.{blk.side}"
        terms[f"{tag}.p.bce"] = bce_loss(blk.p, g)
        terms[f"{tag}.p.iou"] = iou_loss(blk.p, g)
        terms[f"{tag}.e.bce"] = bce_loss(blk.e, ge)
        terms[f"{tag}.e.iou"] = iou_loss(blk.e, ge)
        if supervise_refined and blk.refined is not None:
            terms[f"{tag}.pr.bce"] = bce_loss(blk.refined, g)
            terms[f"{tag}.pr.iou"] = iou_loss(blk.refined, g)
    return sum(terms.values()), terms


def total_loss(stage_results: Sequence, weights=(1.0, 1.0, 1.0)) -> LossReport:
    """``stage_results`` is a list of (stage_sum, terms) pairs, coarse stage first."""
    if len(stage_results) > len(weights):
        raise ConfigError(f"{len(stage_results)} stages but only {len(weights)} weights")
    if any(w < 0 or not math.isfinite(w) for w in weights):
        raise ConfigError(f"stage weights must be finite and non-negative, got {tuple(weights)}")
    total = None
    terms, sums = {}, {}
    for name, (s, t), w in zip(STAGE_NAMES, stage_results, weights):
        total = w * s if total is None else total + w * s
        sums[name] = float(s.detach())
        terms.update({k: float(v.detach()) for k, v in t.items()})
    scalar = sum(w * sums[name] for name, w in zip(sums, weights))
    return LossReport(terms, sums, scalar, tuple(weights), total)


def model_loss(out, gt_mask, weights=(1.0, 1.0, 1.0), edge_width=2, supervise_refined=True) -> LossReport:
    results = [coarse_loss(out.coarse, gt_mask, edge_width)]
    for i, stage in enumerate(out.stages, start=1):
        results.append(stage_loss(stage, gt_mask, edge_width, supervise_refined, prefix=f"rrs{i}"))
    return total_loss(results, weights)
