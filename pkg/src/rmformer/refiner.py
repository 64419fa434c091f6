"""Pixel-wise refiner: re-predict the top-K boundary pixels using globally attended features."""
import math

import torch
import torch.nn as nn

from .errors import ContractViolation, DimensionError
from .layers import ConvBlock


def default_k(h, w):
    return int(round(4 * math.sqrt(h * w)))


def select_top_k(guide, k):
    """Flat indices of the ``k`` largest guide values per sample, ties to the lowest index.

    ``guide`` is (B, 1, h, w) or (h, w); returns (B, k) or (k,) int64, ordered by rank.
    """
    squeeze = guide.dim() == 2
    flat = guide.reshape(1, -1) if squeeze else guide.reshape(guide.shape[0], -1)
    n = flat.shape[1]
    if not 0 <= k <= n:
        raise ContractViolation(f"k={k} outside [0, {n}]")
    # a stable descending sort keeps equal values in index order
    order = torch.sort(flat.detach(), dim=1, descending=True, stable=True).indices[:, :k]
    return order[0] if squeeze else order


def gather_pixels(feat, idx):
    """Rows of (B, K, C) holding the channel vector of ``feat`` (B, C, h, w) at each index."""
    B, C = feat.shape[:2]
    if idx.dim() != 2 or idx.shape[0] != B:
        raise DimensionError(f"index batch {tuple(idx.shape)} does not match features {tuple(feat.shape)}")
    if idx.numel() and int(idx.max()) >= feat.shape[2] * feat.shape[3]:
        raise DimensionError("pixel index outside the feature grid")
    flat = feat.reshape(B, C, -1)
    return torch.gather(flat, 2, idx[:, None, :].expand(B, C, idx.shape[1])).transpose(1, 2)


def scatter_refine(base, values, idx):
    """Copy of ``base`` (B, 1, h, w) with ``values`` (B, K, 1) written at ``idx`` (B, K)."""
    if values.shape[:2] != idx.shape:
        raise ContractViolation(f"{values.shape[1]} predictions for {idx.shape[1]} indices")
    B = base.shape[0]
    flat = base.reshape(B, -1).scatter(1, idx, values.reshape(B, -1).to(base.dtype))
    return flat.view_as(base)


class SelfAttention(nn.Module):
    """Single-head full self-attention over a token sequence (no output projection)."""

    def __init__(self, dim):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim, bias=False)  # a key bias cancels in the softmax
        self.v = nn.Linear(dim, dim)
        self.scale = dim ** -0.5

    def weights(self, x):
        return ((self.q(x) * self.scale) @ self.k(x).transpose(-2, -1)).softmax(-1)

    def forward(self, x):
        return self.weights(x) @ self.v(x)


class GlobalBranch(nn.Module):
    """Three stride-2 conv blocks then self-attention; returns (B, M, dim) with M = hw / 64."""

    def __init__(self, in_ch, dim):
        super().__init__()
        self.down = nn.Sequential(ConvBlock(in_ch, dim, 2), ConvBlock(dim, dim, 2), ConvBlock(dim, dim, 2))
        self.attn = SelfAttention(dim)

    def forward(self, x):
        for axis in (2, 3):
            if x.shape[axis] % 8:
                raise DimensionError(f"global branch input side {x.shape[axis]} not divisible by 8")
        x = self.down(x)
        return self.attn(x.flatten(2).transpose(1, 2))


class PixelRefiner(nn.Module):
    """One refiner instance, attached to a single decoder block.

    ``enc_ch``/``dec_ch`` are the channel counts of the block's encoder and decoder features,
    ``deep_enc_ch``/``deep_dec_ch`` those of the deepest encoder feature and the shared
    stage's fused feature. All projections use ``dim`` channels.
    """

    def __init__(self, enc_ch, dec_ch, deep_enc_ch, deep_dec_ch, dim, k=None):
        super().__init__()
        self.k = k
        self.global_conv = GlobalBranch(deep_enc_ch, dim)
        self.global_f = GlobalBranch(deep_dec_ch, dim)
        self.w_q = nn.Linear(enc_ch, dim)
        self.w_k = nn.Linear(dim, dim)
        self.w_v = nn.Linear(dim, dim)
        self.fc1 = nn.Linear(dim, dec_ch)
        self.fc2 = nn.Linear(dec_ch, 1)

    def global_features(self, g_deep, f_deep):
        if g_deep.shape[-2:] != f_deep.shape[-2:]:
            raise DimensionError(f"deep features differ in size: {tuple(g_deep.shape)} vs {tuple(f_deep.shape)}")
        return self.global_conv(g_deep), self.global_f(f_deep)

    def similarity(self, pi_conv, po_conv):
        """(B, K, M) edge-global similarity, every entry in (0, 1)."""
        if pi_conv.shape[-1] != self.w_q.in_features:
            raise DimensionError(f"selected pixels have {pi_conv.shape[-1]} channels, expected {self.w_q.in_features}")
        if po_conv.shape[-1] != self.w_k.in_features:
            raise DimensionError(f"global tokens have {po_conv.shape[-1]} channels, expected {self.w_k.in_features}")
        return torch.sigmoid(self.w_q(pi_conv) @ self.w_k(po_conv).transpose(-2, -1))

    def reproject(self, s_eg, po_f):
        if s_eg.shape[-1] != po_f.shape[-2]:
            raise DimensionError(f"similarity has {s_eg.shape[-1]} columns but {po_f.shape[-2]} global tokens")
        return s_eg @ self.w_v(po_f)

    def repredict(self, pi_temp, pi_f):
        mixed = self.fc1(pi_temp)
        if mixed.shape != pi_f.shape:
            raise DimensionError(f"projected pixels {tuple(mixed.shape)} vs decoder pixels {tuple(pi_f.shape)}")
        return torch.sigmoid(self.fc2(mixed + pi_f))

    def resolve_k(self, h, w):
        return default_k(h, w) if self.k is None else min(self.k, h * w)

    def forward(self, g_i, f_i, guide, base_pred, g_deep, f_deep):
        """Returns (refined map, selected indices)."""
        h, w = base_pred.shape[-2:]
        for name, t in (("encoder feature", g_i), ("decoder feature", f_i), ("guide", guide)):
            if t.shape[-2:] != base_pred.shape[-2:]:
                raise DimensionError(f"{name} size {tuple(t.shape[-2:])} != prediction size {(h, w)}")
        idx = select_top_k(guide, self.resolve_k(h, w))
        if idx.shape[1] == 0:
            return base_pred, idx
        pi_conv = gather_pixels(g_i, idx)
        pi_f = gather_pixels(f_i, idx)
        po_conv, po_f = self.global_features(g_deep, f_deep)
        pi_temp = self.reproject(self.similarity(pi_conv, po_conv), po_f)
        pi_pred = self.repredict(pi_temp, pi_f)
        return scatter_refine(base_pred, pi_pred, idx), idx


def absdiff_guide(pred):
    """Edge-free guide |P - 0.5|, used in place of the edge map when edges are not predicted."""
    return (pred - 0.5).abs()
