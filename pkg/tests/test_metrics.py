import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planefield._validation import ContractViolation
from planefield.metrics import EvalReport, evaluate, psnr, ssim


def fixture_pair():
    """Deterministic 16x16 RGB pair: a gradient and a noisy, shifted copy."""
    y, x = np.mgrid[0:16, 0:16] / 15.0
    a = np.stack([x, y, 0.5 * (x + y)], axis=-1)
    noise = np.random.default_rng(42).normal(scale=0.05, size=a.shape)
    b = np.clip(np.roll(a, 1, axis=1) * 0.9 + 0.05 + noise, 0, 1)
    return a, b


def reference_ssim(a, b, mask=None):
    """Loop-based SSIM: gray = channel mean, 11x11 Gaussian (std 1.5) windows."""
    ga, gb = a.mean(axis=-1), b.mean(axis=-1)
    k = np.array([math.exp(-((i - 5) ** 2) / (2 * 1.5 ** 2)) for i in range(11)])
    win = np.outer(k, k) / np.outer(k, k).sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    h, w = ga.shape
    for i in range(h - 10):
        for j in range(w - 10):
            if mask is not None and not mask[i:i + 11, j:j + 11].all():
                continue
            pa, pb = ga[i:i + 11, j:j + 11], gb[i:i + 11, j:j + 11]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


# --- PSNR ----------------------------------------------------------------------------------

def test_psnr_mse_hundredth():
    a = np.zeros((4, 4, 3))
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-12)


def test_psnr_identical_capped():
    a = np.random.default_rng(0).uniform(size=(5, 5, 3))
    assert psnr(a, a) == 99.0


def test_psnr_gray_vs_black():
    assert psnr(np.full((3, 3, 3), 0.5), np.zeros((3, 3, 3))) == pytest.approx(6.0206, abs=1e-4)


def test_psnr_mask_selects_pixels():
    a = np.zeros((2, 2, 3))
    b = a.copy()
    b[0, 0] = 1.0
    mask = np.ones((2, 2))
    mask[0, 0] = 0
    assert psnr(b, a, mask) == 99.0


def test_psnr_empty_mask():
    with pytest.raises(ContractViolation):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((2, 2)))


@settings(max_examples=50, deadline=None)
@given(e1=st.floats(1e-4, 0.9), e2=st.floats(1e-4, 0.9))
def test_psnr_strictly_decreasing_in_error(e1, e2):
    if abs(e1 - e2) < 1e-9:
        return
    t = np.zeros((3, 3, 3))
    lo, hi = sorted((e1, e2))
    assert psnr(t + lo, t) > psnr(t + hi, t)


# --- SSIM ----------------------------------------------------------------------------------

def test_ssim_identical():
    a, _ = fixture_pair()
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_negative_image_anticorrelates():
    a, _ = fixture_pair()
    assert ssim(a, 1.0 - a) < 0


def test_ssim_matches_loop_reference():
    a, b = fixture_pair()
    assert ssim(a, b) == pytest.approx(reference_ssim(a, b), abs=1e-6)


def test_ssim_masked_matches_loop_reference():
    a, b = fixture_pair()
    mask = np.ones((16, 16))
    mask[:, 14:] = 0
    mask[0, 0] = 0
    assert ssim(a, b, mask) == pytest.approx(reference_ssim(a, b, mask > 0), abs=1e-6)


def test_ssim_symmetric():
    a, b = fixture_pair()
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)


def test_ssim_mask_too_small():
    a, b = fixture_pair()
    mask = np.zeros((16, 16))
    mask[:10, :10] = 1
    with pytest.raises(ContractViolation):
        ssim(a, b, mask)
    with pytest.raises(ContractViolation):
        ssim(a[:8, :8], b[:8, :8])


def test_metrics_ignore_masked_out_permutation(rng):
    a, b = fixture_pair()
    mask = np.ones((16, 16))
    mask[:, 12:] = 0
    a2, b2 = a.copy(), b.copy()
    perm = rng.permutation(16 * 4)
    a2[:, 12:] = a[:, 12:].reshape(-1, 3)[perm].reshape(16, 4, 3)
    b2[:, 12:] = b[:, 12:].reshape(-1, 3)[perm].reshape(16, 4, 3)
    assert psnr(a2, b2, mask) == psnr(a, b, mask)
    assert ssim(a2, b2, mask) == pytest.approx(ssim(a, b, mask), abs=1e-14)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_ssim_in_range(seed):
    r = np.random.default_rng(seed)
    v = ssim(r.uniform(size=(12, 12, 3)), r.uniform(size=(12, 12, 3)))
    assert -1.0 <= v <= 1.0


# --- reports --------------------------------------------------------------------------------

def test_report_serialization(tmp_path):
    a, b = fixture_pair()
    report = evaluate([a, b], [b, b], [np.ones((16, 16))] * 2)
    assert report.psnr[1] == 99.0
    report.to_json(tmp_path / "r.json")
    report.to_csv(tmp_path / "r.csv")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["frames"] == 2 and data["mask"] == "tissue"
    assert len(data["per_frame"]) == 2
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["frame", "psnr", "ssim"] and len(rows) == 3


def test_report_ssim_nan_when_mask_too_small():
    a, b = fixture_pair()
    mask = np.zeros((16, 16))
    mask[0, 0] = 1
    report = evaluate([a], [b], [mask])
    assert math.isnan(report.ssim[0])
    assert isinstance(EvalReport().masked, bool)
