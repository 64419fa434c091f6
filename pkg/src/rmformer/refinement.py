"""Recurrent refinement stages and the full three-stage pipeline."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import CoarseOutput, CoarsePredictionStage, PatchEmbed
from .config import ModelConfig, StageConfig
from .errors import ContractViolation, DimensionError
from .layers import ConvBlock, ScoreHead, check_spatial, resize
from .refiner import PixelRefiner, absdiff_guide


class EncoderBlock(nn.Module):
    """conv block on the previous feature, concat the resized image, 1x1 back to ``channels``."""

    def __init__(self, channels):
        super().__init__()
        self.conv = ConvBlock(channels, channels)
        self.proj = nn.Conv2d(channels + 3, channels, 1)

    def concat(self, prev, image_hr):
        x = self.conv(prev)
        img = resize(image_hr, x.shape[-2:])
        check_spatial("resized image", img, x.shape[-2:])
        return torch.cat([x, img], dim=1)

    def forward(self, prev, image_hr):
        return self.proj(self.concat(prev, image_hr))


class ImageGuidedEncoder(nn.Module):
    def __init__(self, channels, n_blocks):
        super().__init__()
        self.seed = nn.Conv2d(3, channels, 3, padding=1)
        self.blocks = nn.ModuleList(EncoderBlock(channels) for _ in range(n_blocks))

    def forward(self, image_hr):
        """Features from the stage resolution down; the last one is the deep feature."""
        feats = []
        x = self.seed(image_hr)
        for i, blk in enumerate(self.blocks):
            if i:
                x = F.avg_pool2d(x, 2)
            x = blk(x, image_hr)
            feats.append(x)
        return feats


class FuseEmbed(nn.Module):
    """Stage-specific patch embedding of [low-res image, deep encoder feature]."""

    def __init__(self, enc_ch, embed_dim, patch_size):
        super().__init__()
        self.embed = PatchEmbed(3 + enc_ch, embed_dim, patch_size)

    def forward(self, image_lr, g_deep):
        if image_lr.shape[-2:] != g_deep.shape[-2:]:
            raise DimensionError(
                f"low-res image {tuple(image_lr.shape[-2:])} and deep feature {tuple(g_deep.shape[-2:])} differ")
        return self.embed(torch.cat([image_lr, g_deep], dim=1))


class DecoderBlock(nn.Module):
    """Aligns the incoming decoder feature, adds the encoder feature, fuses both guidance maps."""

    def __init__(self, in_ch, channels):
        super().__init__()
        self.align = nn.Conv2d(in_ch, channels, 1)
        self.conv = ConvBlock(channels + 2, channels)
        self.head_p = ScoreHead(channels)
        self.head_e = ScoreHead(channels)

    def prepare(self, f_prev, size):
        return resize(self.align(f_prev), size)

    def fuse(self, f_next, g_next, e_next, p_prev_stage):
        size = g_next.shape[-2:]
        if f_next.shape != g_next.shape:
            raise DimensionError(f"decoder feature {tuple(f_next.shape)} != encoder feature {tuple(g_next.shape)}")
        check_spatial("edge guidance", e_next, size)
        check_spatial("previous stage prediction", p_prev_stage, size)
        f = self.conv(torch.cat([f_next + g_next, e_next, p_prev_stage], dim=1))
        return f, self.head_p(f), self.head_e(f)

    def forward(self, f_prev, g_next, e_prev, p_prev_stage):
        size = g_next.shape[-2:]
        return self.fuse(self.prepare(f_prev, size), g_next, resize(e_prev, size), resize(p_prev_stage, size))


@dataclass
class BlockOutput:
    side: int
    p: torch.Tensor
    e: torch.Tensor
    refined: Optional[torch.Tensor] = None
    indices: Optional[torch.Tensor] = None


@dataclass
class StageOutput:
    blocks: List[BlockOutput]
    p_s: torch.Tensor
    f_deep: torch.Tensor
    g_deep: torch.Tensor
    cps: Optional[CoarseOutput] = None


class RecurrentRefinementStage(nn.Module):
    """Image guided encoder -> shared coarse stage -> dual-flow guided decoder (+ refiners)."""

    def __init__(self, cfg: StageConfig, model_cfg: ModelConfig, fused_channels):
        super().__init__()
        self.cfg = cfg
        cps_side = model_cfg.cps_side
        C_g = cfg.encoder_channels
        bb = model_cfg.backbone
        self.cps_side = cps_side
        self.encoder = ImageGuidedEncoder(C_g, cfg.n_encoder_blocks)
        self.embed = FuseEmbed(C_g, bb.embed_dim, bb.patch_size)
        self.sides = [cps_side * 2 ** i for i in range(cfg.n_encoder_blocks)]
        self.decoder = nn.ModuleList(
            DecoderBlock(fused_channels if i == 0 else C_g, C_g) for i in range(cfg.n_encoder_blocks))
        self.refiners = nn.ModuleDict({
            str(side): PixelRefiner(C_g, C_g, C_g, fused_channels, C_g, cfg.pr_k) for side in cfg.pr_sides
        })

    def forward(self, image, prev_stage_pred, shared_cps: CoarsePredictionStage) -> StageOutput:
        if prev_stage_pred is None:
            raise ContractViolation("refinement stage needs the previous stage prediction")
        side = self.cfg.stage_resolution
        if tuple(image.shape[-2:]) != (side, side):
            raise DimensionError(f"stage input {tuple(image.shape[-2:])} != stage resolution {side}")
        enc = self.encoder(image)
        g_deep = enc[-1]
        image_lr = resize(image, self.cps_side)
        cps = shared_cps(image_lr, self.embed(image_lr, g_deep))
        f, e = cps.fused, cps.e
        blocks = []
        # decoder runs from the cps resolution up, pairing with encoder features in reverse
        for blk, g, s in zip(self.decoder, reversed(enc), self.sides):
            f, p, e = blk(f, g, e, prev_stage_pred)
            out = BlockOutput(s, p, e)
            refiner = self.refiners[str(s)] if str(s) in self.refiners else None
            if refiner is not None:
                guide = e if self.cfg.pr_guide == "edge" else absdiff_guide(p)
                out.refined, out.indices = refiner(g, f, guide, p, g_deep, cps.fused)
            blocks.append(out)
        last = blocks[-1]
        p_s = last.refined if last.refined is not None else last.p
        return StageOutput(blocks, p_s, cps.fused, g_deep, cps)


@dataclass
class ModelOutput:
    coarse: CoarseOutput
    stages: List[StageOutput] = field(default_factory=list)

    @property
    def predictions(self) -> List[torch.Tensor]:
        """Stage predictions from coarse to finest."""
        return [self.coarse.p] + [s.p_s for s in self.stages]

    def named(self) -> Dict[str, torch.Tensor]:
        preds = self.predictions
        if len(preds) == 3:
            return dict(zip(("P_l", "P_m", "P_h"), preds))
        out = {"P_l": preds[0]}
        if len(preds) > 1:
            out["P_h"] = preds[-1]
        return out


class RMFormer(nn.Module):
    """Coarse stage plus one refinement stage per extra scale, all sharing the coarse stage."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.cps = CoarsePredictionStage(cfg.backbone)
        fused = self.cps.head.out_channels
        self.stages = nn.ModuleList(
            RecurrentRefinementStage(StageConfig.from_model(cfg, s), cfg, fused) for s in cfg.stage_sides)

    def forward(self, image_hr) -> ModelOutput:
        top = self.cfg.scales[-1]
        if tuple(image_hr.shape[-2:]) != (top, top):
            raise DimensionError(f"input {tuple(image_hr.shape[-2:])} != top scale {top}")
        coarse = self.cps(resize(image_hr, self.cfg.cps_side))
        out = ModelOutput(coarse)
        prev = coarse.p
        for stage in self.stages:
            so = stage(resize(image_hr, stage.cfg.stage_resolution), prev, self.cps)
            out.stages.append(so)
            prev = so.p_s
        return out

    def stage_parameters(self):
        """Parameter lists per pipeline stage; every refinement stage also reaches the shared coarse stage."""
        shared = list(self.cps.parameters())
        groups = {"cps": shared}
        for i, stage in enumerate(self.stages, start=1):
            groups[f"rrs{i}"] = shared + list(stage.parameters())
        return groups
