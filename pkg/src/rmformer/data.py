"""Synthetic high-resolution image/mask pairs, augmentation, pyramids and dataset statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .errors import ConfigError, ContractViolation
from .layers import resize

OCTAVES = 4
CONTOUR_POINTS = 16 * 2 ** OCTAVES


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray   # (H, W) float32 in {0, 1}
    seed: int
    meta: dict = field(default_factory=dict)


def fractal_profile(rng, n_coarse=16, octaves=OCTAVES, roughness=0.5):
    """Periodic midpoint-displacement noise of length ``n_coarse * 2**octaves``, roughly in [-1, 1]."""
    values = rng.uniform(-1.0, 1.0, n_coarse)
    amp = 1.0
    for _ in range(octaves):
        amp *= roughness
        mids = 0.5 * (values + np.roll(values, -1)) + rng.uniform(-amp, amp, values.size)
        out = np.empty(values.size * 2)
        out[0::2] = values
        out[1::2] = mids
        values = out
    return values / (np.abs(values).max() + 1e-12)


def _ellipse_contour(cx, cy, a, b, angle, n=CONTOUR_POINTS):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    x, y = a * np.cos(t), b * np.sin(t)
    ca, sa = math.cos(angle), math.sin(angle)
    return np.stack([cx + ca * x - sa * y, cy + sa * x + ca * y], axis=1)


def _polygon_contour(cx, cy, radius, n_vertices, rng, n=CONTOUR_POINTS):
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    radii = radius * rng.uniform(0.6, 1.0, n_vertices)
    verts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
    # resample the closed polyline to n evenly spaced points
    closed = np.vstack([verts, verts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    s = np.concatenate([[0], np.cumsum(seg)])
    u = np.linspace(0, s[-1], n, endpoint=False)
    return np.stack([np.interp(u, s, closed[:, 0]), np.interp(u, s, closed[:, 1])], axis=1)


def _perturb(contour, centre, amplitude, rng):
    if amplitude <= 0:
        return contour
    radial = contour - centre
    radial /= np.linalg.norm(radial, axis=1, keepdims=True) + 1e-12
    return contour + radial * (amplitude * fractal_profile(rng))[:, None]


def _rasterize(contours, side):
    img = Image.new("L", (side, side), 0)
    draw = ImageDraw.Draw(img)
    for c in contours:
        draw.polygon([tuple(p) for p in c], fill=1)
    return np.asarray(img, dtype=np.float32)


def _smooth_noise(rng, side, cells):
    grid = torch.from_numpy(rng.uniform(0, 1, (1, 1, cells, cells)).astype(np.float32))
    up = torch.nn.functional.interpolate(grid, size=(side, side), mode="bicubic", align_corners=False)
    return up[0, 0].numpy()


def boundary_length(mask):
    """Isotropic perimeter estimate: pi/4 times the number of fg/bg 4-neighbour pixel pairs."""
    m = np.asarray(mask, dtype=bool)
    cracks = np.count_nonzero(m[1:, :] != m[:-1, :]) + np.count_nonzero(m[:, 1:] != m[:, :-1])
    # shapes touching the frame have a boundary there too
    cracks += m[0].sum() + m[-1].sum() + m[:, 0].sum() + m[:, -1].sum()
    return math.pi / 4 * cracks


def generate_sample(seed, hr_side=256, complexity=0.5, n_objects=None, kinds=("ellipse", "polygon"),
                    cps_side=64) -> Sample:
    """Deterministic sample with 1-3 filled shapes whose contours carry fractal detail."""
    ratio = hr_side / cps_side
    if hr_side < cps_side or ratio != int(ratio) or int(ratio) & (int(ratio) - 1):
        raise ConfigError(f"hr_side {hr_side} is not a power-of-two multiple of {cps_side}")
    if not 0.0 <= complexity <= 1.0:
        raise ConfigError(f"complexity must be in [0, 1], got {complexity}")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4)) if n_objects is None else n_objects
    contours, shapes = [], []
    for _ in range(n):
        kind = kinds[int(rng.integers(len(kinds)))]
        radius = hr_side * rng.uniform(0.14, 0.26)
        margin = radius * (1.0 + 0.25 * complexity) + 2
        cx, cy = rng.uniform(margin, hr_side - margin, 2)
        if kind == "ellipse":
            a = radius
            b = radius * rng.uniform(0.55, 1.0)
            angle = rng.uniform(0, np.pi)
            c = _ellipse_contour(cx, cy, a, b, angle)
            shapes.append({"kind": kind, "cx": cx, "cy": cy, "a": a, "b": b, "angle": angle})
        else:
            c = _polygon_contour(cx, cy, radius, int(rng.integers(3, 8)), rng)
            shapes.append({"kind": kind, "cx": cx, "cy": cy, "radius": radius})
        contours.append(_perturb(c, np.array([cx, cy]), complexity * 0.2 * radius, rng))
    mask = _rasterize(contours, hr_side)

    fg_col = rng.uniform(0.45, 1.0, 3)
    bg_col = rng.uniform(0.0, 0.55, 3)
    # keep the classes separable in at least one channel
    k = int(np.argmax(np.abs(fg_col - bg_col)))
    if abs(fg_col[k] - bg_col[k]) < 0.3:
        fg_col[k] = min(1.0, bg_col[k] + 0.45)
    fg_tex = _smooth_noise(rng, hr_side, 8)[..., None] - 0.5
    bg_tex = _smooth_noise(rng, hr_side, 6)[..., None] - 0.5
    grain = rng.normal(0, 0.02, (hr_side, hr_side, 3))
    m = mask[..., None]
    image = m * (fg_col + 0.25 * fg_tex) + (1 - m) * (bg_col + 0.25 * bg_tex) + grain
    image = np.clip(image, 0, 1).astype(np.float32)
    meta = {"n_objects": n, "boundary_complexity": complexity, "shapes": shapes,
            "boundary_length": boundary_length(mask)}
    return Sample(image, mask, seed, meta)


def _to_tensor(image, mask):
    img = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None].float()
    msk = torch.from_numpy(np.ascontiguousarray(mask))[None, None].float()
    return img, msk


def augment(sample: Sample, seed, flip_prob=0.5, crop_fraction=0.875, force_flip: Optional[bool] = None) -> Sample:
    """Seeded horizontal flip and random square crop resized back to the original side."""
    if not 0.0 < crop_fraction <= 1.0:
        raise ConfigError(f"crop fraction must be in (0, 1], got {crop_fraction}")
    rng = np.random.default_rng(seed)
    flip = rng.random() < flip_prob if force_flip is None else force_flip
    image, mask = sample.image, sample.mask
    if flip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    h, w = mask.shape
    ch, cw = max(1, int(round(h * crop_fraction))), max(1, int(round(w * crop_fraction)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    if (ch, cw) != (h, w):
        img_t, msk_t = _to_tensor(image[y0:y0 + ch, x0:x0 + cw], mask[y0:y0 + ch, x0:x0 + cw])
        image = resize(img_t, (h, w)).clamp(0, 1)[0].permute(1, 2, 0).numpy()
        mask = (resize(msk_t, (h, w))[0, 0].numpy() >= 0.5).astype(np.float32)
    meta = {**sample.meta, "flipped": bool(flip), "crop": (y0, x0, ch, cw)}
    return replace(sample, image=np.ascontiguousarray(image, dtype=np.float32),
                   mask=np.ascontiguousarray(mask, dtype=np.float32), meta=meta)


def resize_pyramid(image, scales: Sequence[int]) -> List[torch.Tensor]:
    """Bilinear copies of an NCHW (or HWC numpy) image at every scale of a doubling chain."""
    for a, b in zip(scales, scales[1:]):
        if b != 2 * a:
            raise ConfigError(f"scales {tuple(scales)} are not a doubling chain")
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None].float()
    return [resize(image, s).clamp(0, 1) for s in scales]


@dataclass
class DatasetStats:
    diagonal_edges: np.ndarray
    diagonal_histogram: np.ndarray
    edge_edges: np.ndarray
    edge_pixel_histogram: np.ndarray
    diagonals: np.ndarray
    edge_pixels: np.ndarray


DEFAULT_DIAGONAL_EDGES = (0, 256, 512, 1024, 2048, 4096, 8192, 16384)
DEFAULT_EDGE_EDGES = (0, 1, 1000, 2000, 4000, 8000, 16000, 32000, 64000)


def _bucket(values, edges):
    edges = np.asarray(edges, dtype=np.float64)
    # values beyond the last edge land in the last bucket
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, len(edges) - 2)
    return np.bincount(idx, minlength=len(edges) - 1)


def dataset_stats(masks, image_dims=None, diagonal_edges=DEFAULT_DIAGONAL_EDGES,
                  edge_edges=DEFAULT_EDGE_EDGES) -> DatasetStats:
    from .losses import edge_ground_truth

    masks = list(masks)
    if not masks:
        raise ContractViolation("dataset_stats needs at least one mask")
    dims = image_dims or [m.shape[:2] for m in masks]
    diagonals = np.array([math.hypot(h, w) for h, w in dims])
    edges = np.array([
        int(edge_ground_truth(torch.from_numpy(np.asarray(m, dtype=np.float32)), 1).sum()) for m in masks
    ])
    return DatasetStats(np.asarray(diagonal_edges), _bucket(diagonals, diagonal_edges),
                        np.asarray(edge_edges), _bucket(edges, edge_edges), diagonals, edges)


def thumbnail(image, side=16):
    """Grayscale area-averaged ``side x side`` vector."""
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=2) if img.ndim == 3 else img
    t = torch.from_numpy(gray)[None, None]
    return torch.nn.functional.adaptive_avg_pool2d(t, side).flatten().numpy()


def near_duplicate_filter(images, threshold=0.99):
    """Greedy scan: drop an image whose thumbnail cosine similarity to any kept one exceeds ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must be in [0, 1], got {threshold}")
    kept, vecs = [], []
    for i, img in enumerate(images):
        v = thumbnail(img)
        v = v / (np.linalg.norm(v) + 1e-12)
        if vecs and np.max(np.clip(np.stack(vecs) @ v, -1.0, 1.0)) > threshold:
            continue
        kept.append(i)
        vecs.append(v)
    return kept


# file I/O ---------------------------------------------------------------

def to_uint8(x):
    return np.rint(np.clip(np.asarray(x, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def save_sample(sample: Sample, out_dir, name):
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    img_path = out_dir / "images" / f"{name}.png"
    mask_path = out_dir / "masks" / f"{name}.png"
    Image.fromarray(to_uint8(sample.image), "RGB").save(img_path)
    Image.fromarray(to_uint8(sample.mask), "L").save(mask_path)
    return img_path, mask_path


def write_dataset(samples, out_dir):
    out_dir = Path(out_dir)
    lines = []
    for s in samples:
        img_path, mask_path = save_sample(s, out_dir, f"{s.seed:06d}")
        lines.append(f"{img_path.relative_to(out_dir)}\t{mask_path.relative_to(out_dir)}\t{s.seed}\n")
    (out_dir / "manifest.txt").write_text("".join(lines))
    return out_dir / "manifest.txt"


def load_image(path, side=None):
    with Image.open(path) as im:
        im = im.convert("RGB")
        if side is not None and im.size != (side, side):
            im = im.resize((side, side), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_mask(path, side=None):
    with Image.open(path) as im:
        im = im.convert("L")
        if side is not None and im.size != (side, side):
            im = im.resize((side, side), Image.NEAREST)
        return (np.asarray(im, dtype=np.float32) >= 127.5).astype(np.float32)


def load_directory(data_dir, side) -> List[Sample]:
    """Load ``images/*`` and ``masks/*`` pairs matched by file stem, resized to ``side``."""
    data_dir = Path(data_dir)
    masks = {p.stem: p for p in sorted((data_dir / "masks").iterdir())}
    samples = []
    for i, img_path in enumerate(sorted((data_dir / "images").iterdir())):
        if img_path.stem in masks:
            samples.append(Sample(load_image(img_path, side), load_mask(masks[img_path.stem], side), i,
                                  {"name": img_path.stem}))
    return samples


def synthetic_dataset(n, hr_side, complexity, seed_base=0, cps_side=64) -> List[Sample]:
    return [generate_sample(seed_base + i, hr_side, complexity, cps_side=cps_side) for i in range(n)]
