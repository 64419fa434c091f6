"""Saliency evaluation: MAE, max F-measure, max E-measure, S-measure and mean boundary accuracy.

Predictions are float maps in [0, 1]; ground truths are binary. Threshold-based metrics
quantise the prediction to 8 bits and sweep thresholds ``i / 255`` for ``i = 0..255``
(a pixel is foreground when ``q > i``, so an inverted mask never scores at threshold 0).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
from scipy import ndimage

from .errors import ContractViolation, DimensionError

EPS = np.finfo(np.float64).eps
N_THRESHOLDS = 256
METRIC_NAMES = ("mae", "fmax", "em", "sm", "mba")


def _check(p, g):
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g


def _binary_gt(g):
    g = np.asarray(g)
    if not np.all((g == 0) | (g == 1)):
        raise ContractViolation("ground truth must be binary")
    return g.astype(bool)


def quantize(p):
    return np.rint(np.clip(p, 0.0, 1.0) * 255).astype(np.int64)


def mae(p, g):
    p, g = _check(p, g)
    return float(np.mean(np.abs(p - g.astype(np.float64))))


def _threshold_counts(p, g):
    """TP and FP counts per threshold i (foreground = q > i), i = 0..255."""
    q = quantize(p)
    fg_hist = np.bincount(q[g], minlength=256)
    bg_hist = np.bincount(q[~g], minlength=256)
    # reversed cumsum counts q >= j; shift by one for the strict comparison
    tp = np.cumsum(fg_hist[::-1])[::-1][1:].astype(np.float64)
    fp = np.cumsum(bg_hist[::-1])[::-1][1:].astype(np.float64)
    return np.append(tp, 0.0), np.append(fp, 0.0)


def f_max(p, g, beta2=0.3):
    p, g = _check(p, g)
    g = _binary_gt(g)
    tp, fp = _threshold_counts(p, g)
    n_pos = g.sum()
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        # degenerate gt: score 1 iff some threshold reproduces it exactly
        fn = n_pos - tp
        exact = (fp == 0) & (fn == 0)
        return float(exact.any())
    precision = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    recall = tp / n_pos
    denom = beta2 * precision + recall
    f = np.divide((1 + beta2) * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f.max())


def _enhanced_score(tp, fp, n_pos, n):
    """Mean enhanced alignment of binarised maps summarised by their TP/FP counts."""
    n_neg = n - n_pos
    if n_pos == 0:
        # alignment reduces to agreement with an empty map
        return (n - (tp + fp)) / n
    if n_neg == 0:
        return (tp + fp) / n
    fn = n_pos - tp
    tn = n_neg - fp
    mu_f = (tp + fp) / n
    mu_g = n_pos / n
    score = np.zeros_like(tp)
    for count, f_val, g_val in ((tp, 1.0, 1.0), (fp, 1.0, 0.0), (fn, 0.0, 1.0), (tn, 0.0, 0.0)):
        a = f_val - mu_f
        b = g_val - mu_g
        align = 2 * a * b / (a * a + b * b + EPS)
        score = score + count * (align + 1) ** 2 / 4
    return score / n


def e_measure(p, g):
    p, g = _check(p, g)
    g = _binary_gt(g)
    tp, fp = _threshold_counts(p, g)
    return float(np.max(_enhanced_score(tp, fp, int(g.sum()), g.size)))


def _object_score(x):
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2 * mu / (mu * mu + 1 + sigma + EPS)


def _s_object(p, g):
    fg = p[g]
    bg = 1 - p[~g]
    u = g.mean()
    return u * _object_score(fg) + (1 - u) * _object_score(bg)


def _ssim(p, g):
    n = p.size
    x = p.mean()
    y = g.mean()
    sx = ((p - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((g - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((p - x) * (g - y)).sum() / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _centroid(g):
    """Foreground centroid in 1-based pixel coordinates, halves rounded up."""
    h, w = g.shape
    if not g.any():
        return int(math.floor(w / 2 + 0.5)), int(math.floor(h / 2 + 0.5))
    ys, xs = np.nonzero(g)
    return int(math.floor(xs.mean() + 1.5)), int(math.floor(ys.mean() + 1.5))


def _s_region(p, g):
    h, w = g.shape
    x, y = _centroid(g)
    gf = g.astype(np.float64)
    area = h * w
    parts = (
        (slice(0, y), slice(0, x), x * y / area),
        (slice(0, y), slice(x, w), (w - x) * y / area),
        (slice(y, h), slice(0, x), x * (h - y) / area),
        (slice(y, h), slice(x, w), (w - x) * (h - y) / area),
    )
    score = 0.0
    for rows, cols, weight in parts:
        if weight > 0 and p[rows, cols].size:
            score += weight * _ssim(p[rows, cols], gf[rows, cols])
    return score


def s_measure(p, g, alpha=0.5):
    p, g = _check(p, g)
    g = _binary_gt(g)
    y = g.mean()
    if y == 0:
        return float(1 - p.mean())
    if y == 1:
        return float(p.mean())
    q = alpha * _s_object(p, g) + (1 - alpha) * _s_region(p, g)
    return float(min(max(q, 0.0), 1.0))


def boundary_radii(h, w, steps=5):
    r_max = max(1.0, 0.003 * math.hypot(h, w))
    return [max(1, int(r)) for r in np.linspace(1.0, r_max, steps)]


def disk(radius):
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (xx * xx + yy * yy) <= radius * radius


def boundary_band(g, radius):
    """Pixels whose disk neighbourhood (clipped to the frame) holds both classes."""
    fp = disk(radius)
    gi = g.astype(np.uint8)
    dil = ndimage.maximum_filter(gi, footprint=fp, mode="nearest")
    ero = ndimage.minimum_filter(gi, footprint=fp, mode="nearest")
    return dil != ero


def mba(p, g, threshold=0.5):
    """Mean over 5 radii of binarised-prediction accuracy inside the gt boundary band.

    A radius with an empty band (constant gt) falls back to full-frame accuracy.
    """
    p, g = _check(p, g)
    g = _binary_gt(g)
    seg = p >= threshold
    correct = seg == g
    accs = []
    for r in boundary_radii(*g.shape):
        band = boundary_band(g, r)
        accs.append(correct[band].mean() if band.any() else correct.mean())
    return float(np.mean(accs))


def evaluate_pair(p, g, beta2=0.3) -> Dict[str, float]:
    return {
        "mae": mae(p, g),
        "fmax": f_max(p, g, beta2),
        "em": e_measure(p, g),
        "sm": s_measure(p, g),
        "mba": mba(p, g),
    }


@dataclass
class MetricReport:
    per_image: Dict[str, Dict[str, float]] = field(default_factory=dict)
    skipped: List[str] = field(default_factory=list)

    @property
    def means(self) -> Dict[str, float]:
        if not self.per_image:
            return {k: float("nan") for k in METRIC_NAMES}
        rows = list(self.per_image.values())
        return {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("filename",) + METRIC_NAMES)
            for name in sorted(self.per_image):
                writer.writerow([name] + [repr(self.per_image[name][k]) for k in METRIC_NAMES])
            means = self.means
            writer.writerow(["mean"] + [repr(means[k]) for k in METRIC_NAMES])


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def _index_dir(d, strip=""):
    out = {}
    for p in sorted(Path(d).iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        stem = p.stem
        if strip:
            if not stem.endswith(strip):
                continue
            stem = stem[: -len(strip)]
        out[stem] = p
    return out


def load_gray(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def evaluate_dataset(pred_dir, gt_dir, beta2=0.3, jobs=1, pred_suffix="") -> MetricReport:
    """Match files by stem; unmatched names on either side are recorded as skips.

    With ``pred_suffix`` (e.g. ``"_ph"``) only predictions ending in it are read, and the
    suffix is dropped before matching.
    """
    preds = _index_dir(pred_dir, pred_suffix)
    gts = _index_dir(gt_dir)
    report = MetricReport()
    report.skipped = sorted(set(preds) ^ set(gts))
    names = sorted(set(preds) & set(gts))

    def one(name):
        p = load_gray(preds[name])
        g = (load_gray(gts[name]) >= 0.5).astype(np.float64)
        return name, evaluate_pair(p, g, beta2)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, names))
    else:
        results = [one(n) for n in names]
    report.per_image = dict(results)
    return report
