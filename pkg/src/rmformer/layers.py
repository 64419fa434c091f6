"""Small building blocks shared by every stage."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError


def resize(x, size):
    """Bilinear resize of an NCHW tensor to ``size`` (int or (h, w)).

    Antialiasing is switched on when shrinking so image guidance does not alias.
    """
    if isinstance(size, int):
        size = (size, size)
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    shrink = size[0] < x.shape[-2] or size[1] < x.shape[-1]
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=shrink)


def resize_mask(mask, size):
    """Nearest-neighbour resize for binary ground truth, keeps values in {0, 1}."""
    if isinstance(size, int):
        size = (size, size)
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask
    return F.interpolate(mask, size=tuple(size), mode="nearest")


def check_spatial(name, x, hw):
    if tuple(x.shape[-2:]) != tuple(hw):
        raise DimensionError(f"{name}: spatial shape {tuple(x.shape[-2:])} != expected {tuple(hw)}")


class ConvBlock(nn.Module):
    """3x3 conv -> BatchNorm -> GELU."""

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)
        self.act = nn.GELU()

    def forward(self, x):
        if x.shape[1] != self.conv.in_channels:
            raise DimensionError(f"conv block expects {self.conv.in_channels} channels, got {x.shape[1]}")
        return self.act(self.bn(self.conv(x)))


class ScoreHead(nn.Module):
    """1x1 projection to one channel followed by a sigmoid."""

    def __init__(self, in_ch):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, 1, 1)

    def forward(self, x):
        return torch.sigmoid(self.proj(x))
