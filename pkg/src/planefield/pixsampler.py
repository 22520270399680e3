"""Occlusion- and motion-aware ray selection.

Each frame gets a per-pixel weight: the largest masked color change against
neighbouring frames (mean absolute difference over channels), lower-bounded
by ``alpha``, times an occlusion-frequency boost ``beta * M_i * T / sum_j M_j``.
Tool pixels get zero weight. Batches are drawn i.i.d. from all frames jointly.
"""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ._validation import ContractViolation, require

logger = logging.getLogger(__name__)


@dataclass
class WeightMap:
    frame: int
    weights: np.ndarray      # H x W, non-negative
    total: float

    def __post_init__(self):
        require(np.all(self.weights >= 0), "weight map has negative entries")


def occlusion_scale(masks, beta=1.0):
    """Per-frame occlusion boost; pixels never visible get 0 in every frame."""
    masks = np.asarray(masks, dtype=np.float64)
    require(masks.ndim == 3 and masks.shape[0] >= 1, "occlusion_scale: masks must be (T, H, W)")
    require(beta > 0, "occlusion_scale: beta must be positive")
    t = masks.shape[0]
    visible = masks.sum(axis=0)
    ratio = np.divide(t, visible, out=np.zeros_like(visible), where=visible > 0)
    return beta * masks * ratio[None]


def temporal_difference(images, masks, window):
    """Max over |i - j| < window of the per-pixel mean-abs masked color change."""
    masked = np.asarray(images, dtype=np.float64) * np.asarray(masks, dtype=np.float64)[..., None]
    t = masked.shape[0]
    out = np.zeros(masked.shape[:3])
    for i in range(t):
        lo, hi = max(0, i - window + 1), min(t, i + window)
        for j in range(lo, hi):
            if j != i:
                np.maximum(out[i], np.abs(masked[i] - masked[j]).sum(axis=-1) / 3.0, out=out[i])
    return out


def weight_maps(frames, alpha=0.1, beta=1.0, window=25, mode="max"):
    """Build one WeightMap per frame.

    ``mode='max'`` lower-bounds the temporal difference by ``alpha``;
    ``mode='min'`` caps it at ``alpha`` instead (kept for comparison).
    """
    if not frames:
        raise ContractViolation("weight_maps: no frames")
    require(alpha > 0, "weight_maps: alpha must be positive")
    require(window >= 1, "weight_maps: window must be at least 1")
    require(mode in ("max", "min"), f"weight_maps: unknown mode {mode!r}")
    images = np.stack([f.image for f in frames])
    masks = np.stack([f.mask for f in frames])
    diff = temporal_difference(images, masks, window)
    bounded = np.maximum(diff, alpha) if mode == "max" else np.minimum(diff, alpha)
    w = bounded * occlusion_scale(masks, beta)
    out = []
    for i in range(len(frames)):
        if not np.any(w[i] > 0):
            logger.warning("frame %d has no samplable pixels", i)
        out.append(WeightMap(i, w[i], float(w[i].sum())))
    return out


def _content_key(frames, alpha, beta, window, mode):
    h = hashlib.sha256()
    for f in frames:
        h.update(np.ascontiguousarray(f.image, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(f.mask, dtype=np.float64).tobytes())
    h.update(repr((float(alpha), float(beta), int(window), mode)).encode())
    return h.hexdigest()[:32]


def cached_weight_maps(frames, alpha=0.1, beta=1.0, window=25, mode="max", cache_dir=None):
    """``weight_maps`` memoized on disk by a content hash of frames and parameters."""
    if cache_dir is None:
        return weight_maps(frames, alpha, beta, window, mode)
    path = Path(cache_dir) / f"weights-{_content_key(frames, alpha, beta, window, mode)}.npy"
    if path.exists():
        w = np.load(path)
        return [WeightMap(i, w[i], float(w[i].sum())) for i in range(w.shape[0])]
    maps = weight_maps(frames, alpha, beta, window, mode)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.stack([m.weights for m in maps]))
    return maps


def draw_batch(maps, batch, rng):
    """I.i.d. draws proportional to all weights jointly.

    Returns ``(frames, rows, cols)`` integer arrays of length ``batch``.
    """
    require(batch >= 1, "draw_batch: batch must be at least 1")
    w = np.stack([m.weights for m in maps])
    flat = w.ravel()
    total = flat.sum()
    if not total > 0:
        raise ContractViolation("draw_batch: all sampling weights are zero")
    cdf = np.cumsum(flat)
    u = rng.uniform(0.0, cdf[-1], size=batch)
    idx = np.searchsorted(cdf, u, side="right")
    idx = np.minimum(idx, flat.size - 1)
    # guard against landing on a zero-weight entry through float ties
    bad = flat[idx] <= 0
    if bad.any():
        idx[bad] = np.searchsorted(cdf, cdf[idx[bad]], side="left")
    f, r, c = np.unravel_index(idx, w.shape)
    return f, r, c


def export_weight_maps(maps, out_dir):
    """Write max-normalized 8-bit grayscale PNGs for inspection."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for m in maps:
        peak = m.weights.max()
        img = np.zeros_like(m.weights) if peak <= 0 else m.weights / peak
        Image.fromarray(np.round(img * 255).astype(np.uint8), "L").save(out / f"{m.frame:06d}.png")
