"""Coarse prediction stage: patch embedding, shifted-window transformer, coarse head."""
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BackboneConfig
from .errors import DimensionError
from .layers import ConvBlock, ScoreHead, resize


class PatchEmbed(nn.Module):
    """Non-overlapping ``p x p`` patches, each mapped by one shared affine map."""

    def __init__(self, in_ch, embed_dim, patch_size):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_ch, embed_dim, patch_size, stride=patch_size)

    def forward(self, x):
        p = self.patch_size
        if x.shape[1] != self.proj.in_channels:
            raise DimensionError(f"patch embedding expects {self.proj.in_channels} channels, got {x.shape[1]}")
        for axis, name in ((2, "height"), (3, "width")):
            if x.shape[axis] % p:
                raise DimensionError(f"image {name} {x.shape[axis]} not divisible by patch size {p}")
        return self.proj(x)


def window_partition(x, window):
    # (B, H, W, C) -> (B * nW, window * window, C)
    B, H, W, C = x.shape
    x = x.view(B, H // window, window, W // window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, C)


def window_reverse(windows, window, H, W):
    C = windows.shape[-1]
    x = windows.view(-1, H // window, W // window, window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def relative_position_index(window, table_window):
    """Pairwise offsets inside a ``window`` grid, indexed into a table built for ``table_window``."""
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
    coords = coords.flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + (table_window - 1)
    return rel[0] * (2 * table_window - 1) + rel[1]


def shifted_window_mask(H, W, window, shift):
    """Additive mask keeping attention inside the regions of a cyclically shifted grid."""
    img = torch.zeros(1, H, W, 1)
    cnt = 0
    spans = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    for hs in spans:
        for ws in spans:
            img[:, hs, ws, :] = cnt
            cnt += 1
    ids = window_partition(img, window).squeeze(-1)
    diff = ids[:, None, :] - ids[:, :, None]
    return torch.zeros_like(diff).masked_fill(diff != 0, -100.0)


class WindowAttention(nn.Module):
    """Multi-head self-attention within windows, with a learned relative position bias."""

    def __init__(self, dim, num_heads, window_size):
        super().__init__()
        if dim % num_heads:
            raise DimensionError(f"width {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        # no key bias: softmax is invariant to it
        self.q_bias = nn.Parameter(torch.zeros(dim))
        self.v_bias = nn.Parameter(torch.zeros(dim))
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))

    def position_bias(self, window):
        idx = relative_position_index(window, self.window_size).to(self.relative_position_bias_table.device)
        bias = self.relative_position_bias_table[idx.reshape(-1)]
        return bias.view(window * window, window * window, -1).permute(2, 0, 1)

    def forward(self, x, window, mask=None):
        Bw, N, C = x.shape
        h = self.num_heads
        bias = torch.cat([self.q_bias, torch.zeros_like(self.q_bias), self.v_bias])
        qkv = F.linear(x, self.qkv.weight, bias).reshape(Bw, N, 3, h, C // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self.position_bias(window).unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(Bw // nW, nW, h, N, N) + mask.to(attn.dtype)[None, :, None]
            attn = attn.view(Bw, h, N, N)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


def effective_window(side, window):
    """Windows larger than the grid collapse to one full-grid window with no shift."""
    return (side, False) if side <= window else (window, True)


def windowed_attention(x, attn: WindowAttention, shift: int):
    """Apply ``attn`` over (optionally cyclically shifted) windows of a (B, H, W, C) grid."""
    B, H, W, C = x.shape
    if H != W:
        raise DimensionError(f"token grid must be square, got {H}x{W}")
    window, can_shift = effective_window(H, attn.window_size)
    if H % window:
        raise DimensionError(f"token grid side {H} not divisible by window size {window}")
    shift = shift if can_shift else 0
    mask = None
    if shift:
        x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        mask = shifted_window_mask(H, W, window, shift).to(x.device)
    out = window_reverse(attn(window_partition(x, window), window, mask), window, H, W)
    if shift:
        out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
    return out


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock(nn.Module):
    def __init__(self, dim, num_heads, window_size, shift, mlp_ratio=4.0):
        super().__init__()
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + windowed_attention(self.norm1(x), self.attn, self.shift)
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat -> LayerNorm -> linear; halves the grid, doubles channels."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise DimensionError(f"cannot merge odd token grid {H}x{W}")
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


class TransformerStage(nn.Module):
    """One hierarchy level; levels after the first start with patch merging."""

    def __init__(self, stage_idx, cfg: BackboneConfig):
        super().__init__()
        if stage_idx not in (1, 2, 3, 4):
            raise ValueError(f"stage_idx must be in 1..4, got {stage_idx}")
        self.stage_idx = stage_idx
        dim = cfg.embed_dim * 2 ** (stage_idx - 1)
        self.merge = PatchMerging(dim // 2) if stage_idx > 1 else None
        self.blocks = nn.ModuleList(
            SwinBlock(dim, cfg.heads[stage_idx - 1], cfg.window_size,
                      shift=(cfg.window_size // 2) if j % 2 else 0, mlp_ratio=cfg.mlp_ratio)
            for j in range(cfg.depths[stage_idx - 1])
        )
        self.dim = dim

    def forward(self, x):
        """(B, H, W, C) tokens in, (B, H', W', C') tokens out."""
        if self.merge is not None:
            x = self.merge(x)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"stage {self.stage_idx} expects {self.dim} channels, got {x.shape[-1]}")
        for blk in self.blocks:
            x = blk(x)
        return x


class CoarseHead(nn.Module):
    """Per-level channel reduction, fusion at stride 4, upsampling, two score heads."""

    def __init__(self, embed_dim, patch_size):
        super().__init__()
        C = embed_dim
        self.patch_size = patch_size
        self.level_channels = [C * 2 ** i for i in range(4)]
        self.reduce = nn.ModuleList(ConvBlock(ch, C) for ch in self.level_channels)
        self.fuse = ConvBlock(4 * C, C)
        self.shrink = ConvBlock(C, max(1, C // 8))
        self.head_p = ScoreHead(max(1, C // 8))
        self.head_e = ScoreHead(max(1, C // 8))

    @property
    def out_channels(self):
        return self.shrink.conv.out_channels

    def check(self, pyramid):
        if len(pyramid) != 4:
            raise DimensionError(f"expected 4 pyramid levels, got {len(pyramid)}")
        h, w = pyramid[0].shape[-2:]
        for i, (lvl, ch) in enumerate(zip(pyramid, self.level_channels)):
            want = (lvl.shape[0], ch, h // 2 ** i, w // 2 ** i)
            if tuple(lvl.shape) != want:
                raise DimensionError(f"pyramid level {i + 1} has shape {tuple(lvl.shape)}, expected {want}")

    def forward(self, pyramid):
        self.check(pyramid)
        grid = pyramid[0].shape[-2:]
        ups = [resize(f(a), grid) for f, a in zip(self.reduce, pyramid)]
        a_cat = self.fuse(torch.cat(ups, dim=1))
        s_cat = self.shrink(resize(a_cat, (grid[0] * self.patch_size, grid[1] * self.patch_size)))
        return s_cat, self.head_p(s_cat), self.head_e(s_cat)


@dataclass
class CoarseOutput:
    pyramid: List[torch.Tensor]   # NCHW levels at strides 4, 8, 16, 32
    fused: torch.Tensor           # (B, C/8, H_l, W_l)
    p: torch.Tensor               # (B, 1, H_l, W_l)
    e: torch.Tensor


class CoarsePredictionStage(nn.Module):
    """Backbone + coarse head. The same instance is reused by every refinement stage."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(3, cfg.embed_dim, cfg.patch_size)
        self.stages = nn.ModuleList(TransformerStage(i, cfg) for i in range(1, 5))
        self.norms = nn.ModuleList(nn.LayerNorm(s.dim) for s in self.stages)
        self.head = CoarseHead(cfg.embed_dim, cfg.patch_size)

    def token_shape(self, image):
        p = self.cfg.patch_size
        return (image.shape[0], self.cfg.embed_dim, image.shape[-2] // p, image.shape[-1] // p)

    def encode(self, tokens):
        x = tokens.permute(0, 2, 3, 1)
        pyramid = []
        for stage, norm in zip(self.stages, self.norms):
            x = stage(x)
            pyramid.append(norm(x).permute(0, 3, 1, 2))
        return pyramid

    def forward(self, image_lr, injected_tokens: Optional[torch.Tensor] = None) -> CoarseOutput:
        if injected_tokens is None:
            tokens = self.patch_embed(image_lr)
        else:
            want = self.token_shape(image_lr)
            if tuple(injected_tokens.shape) != want:
                raise DimensionError(f"injected tokens {tuple(injected_tokens.shape)} != patch grid {want}")
            tokens = injected_tokens
        pyramid = self.encode(tokens)
        fused, p, e = self.head(pyramid)
        return CoarseOutput(pyramid, fused, p, e)
