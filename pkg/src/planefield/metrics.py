"""Masked PSNR and SSIM."""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from ._validation import ContractViolation

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _mask_for(img, mask):
    if mask is None:
        return np.ones(img.shape[:2], dtype=bool)
    mask = np.asarray(mask) > 0.5
    if mask.shape != img.shape[:2]:
        raise ContractViolation(f"mask shape {mask.shape} does not match image {img.shape[:2]}")
    return mask


def psnr(pred, target, mask=None):
    """PSNR in dB over masked pixels with peak 1.0; zero error reports ``PSNR_CAP``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractViolation(f"psnr: shape mismatch {pred.shape} vs {target.shape}")
    m = _mask_for(target, mask)
    if not m.any():
        raise ContractViolation("psnr: empty mask")
    mse = float(np.mean((pred[m] - target[m]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _gray(img):
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def ssim_map(pred, target):
    """Local SSIM for every window lying fully inside the image."""
    x, y = _gray(pred), _gray(target)
    win = gaussian_window()

    def filt(a):
        return convolve2d(a, win[::-1, ::-1], mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    return ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))


def ssim(pred, target, mask=None):
    """Mean local SSIM over windows fully inside the mask (gray = channel mean)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractViolation(f"ssim: shape mismatch {pred.shape} vs {target.shape}")
    m = _mask_for(target, mask).astype(np.float64)
    if min(m.shape) < SSIM_WINDOW:
        raise ContractViolation("ssim: image smaller than one window")
    inside = convolve2d(m, np.ones((SSIM_WINDOW, SSIM_WINDOW)), mode="valid") >= SSIM_WINDOW ** 2 - 0.5
    if not inside.any():
        raise ContractViolation("ssim: mask too small for one window")
    return float(ssim_map(pred, target)[inside].mean())


@dataclass
class EvalReport:
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    masked: bool = True

    def summary(self):
        p, s = np.asarray(self.psnr), np.asarray(self.ssim)
        return {"psnr_mean": float(p.mean()), "psnr_std": float(p.std()),
                "ssim_mean": float(np.nanmean(s)), "ssim_std": float(np.nanstd(s)),
                "frames": len(self.psnr), "mask": "tissue" if self.masked else "full"}

    def to_json(self, path):
        data = dict(self.summary(), per_frame=[{"frame": i, "psnr": p, "ssim": s}
                                               for i, (p, s) in enumerate(zip(self.psnr, self.ssim))])
        Path(path).write_text(json.dumps(data, indent=2))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "psnr", "ssim"])
            for i, (p, s) in enumerate(zip(self.psnr, self.ssim)):
                w.writerow([i, p, s])


def evaluate(preds, targets, masks=None, use_mask=True):
    report = EvalReport(masked=use_mask)
    for i, (p, t) in enumerate(zip(preds, targets)):
        m = masks[i] if (use_mask and masks is not None) else None
        report.psnr.append(psnr(p, t, m))
        try:
            report.ssim.append(ssim(p, t, m))
        except ContractViolation:
            report.ssim.append(float("nan"))
    return report
