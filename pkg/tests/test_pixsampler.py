import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from planefield._validation import ContractViolation
from planefield.data import MaskedFrame
from planefield.pixsampler import (WeightMap, cached_weight_maps, draw_batch, export_weight_maps,
                                   occlusion_scale, weight_maps)
from toys import three_frame_toy


def frames_from(images, masks=None):
    images = np.asarray(images, dtype=np.float64)
    if masks is None:
        masks = np.ones(images.shape[:3])
    times = np.linspace(-1, 1, len(images)) if len(images) > 1 else [0.0]
    return [MaskedFrame(images[i], np.asarray(masks[i], dtype=np.float64), float(times[i]))
            for i in range(len(images))]


def maps_of(weights):
    return [WeightMap(i, np.asarray(w, dtype=np.float64), float(np.sum(w))) for i, w in enumerate(weights)]


# --- occlusion scale -------------------------------------------------------------------

def test_no_tools_gives_beta():
    np.testing.assert_array_equal(occlusion_scale(np.ones((4, 3, 3)), beta=0.7), 0.7)


def test_visible_once_in_three():
    masks = np.ones((3, 2, 2))
    masks[[0, 2], 0, 1] = 0.0
    omega = occlusion_scale(masks, 1.0)
    np.testing.assert_array_equal(omega[:, 0, 1], [0.0, 3.0, 0.0])


def test_never_visible_pixel():
    masks = np.ones((3, 2, 2))
    masks[:, 1, 1] = 0.0
    with np.errstate(all="raise"):
        omega = occlusion_scale(masks, 2.0)
    np.testing.assert_array_equal(omega[:, 1, 1], 0.0)


# --- weight maps --------------------------------------------------------------------------

def test_static_video_gets_floor():
    frames = frames_from(np.full((3, 4, 5, 3), 0.4))
    for m in weight_maps(frames, alpha=0.1, beta=2.0, window=2):
        np.testing.assert_allclose(m.weights, 0.2, rtol=1e-15)


def test_flipping_pixel():
    imgs = np.zeros((2, 3, 3, 3))
    imgs[1, 1, 2] = 1.0
    for m in weight_maps(frames_from(imgs), alpha=0.1, beta=1.0, window=1 + 1):
        assert m.weights[1, 2] == 1.0
        others = np.delete(m.weights.ravel(), 1 * 3 + 2)
        np.testing.assert_array_equal(others, 0.1)


def test_tool_pixel_weight_zero():
    imgs = np.random.default_rng(0).uniform(size=(3, 4, 4, 3))
    masks = np.ones((3, 4, 4))
    masks[1, 2, 2] = 0.0
    maps = weight_maps(frames_from(imgs, masks), window=3)
    assert maps[1].weights[2, 2] == 0.0


def test_window_limits_comparison():
    imgs = np.zeros((5, 1, 1, 3))
    imgs[4] = 1.0
    maps = weight_maps(frames_from(imgs), alpha=0.01, window=2)
    # frame 0 only sees frame 1, which matches it
    assert maps[0].weights[0, 0] == 0.01
    assert maps[3].weights[0, 0] == 1.0


def test_min_mode_caps_at_alpha():
    imgs = np.zeros((2, 1, 2, 3))
    imgs[1, 0, 0] = 1.0
    maps = weight_maps(frames_from(imgs), alpha=0.1, window=2, mode="min")
    np.testing.assert_array_equal(maps[0].weights, [[0.1, 0.0]])


def test_weight_maps_empty():
    with pytest.raises(ContractViolation):
        weight_maps([])


@pytest.mark.parametrize("kw", [{"alpha": 0.0}, {"window": 0}, {"mode": "mean"}])
def test_weight_maps_bad_parameters(kw):
    with pytest.raises(ContractViolation):
        weight_maps(three_frame_toy(), **kw)


@settings(max_examples=40, deadline=None)
@given(bump=st.floats(0.0, 0.5), seed=st.integers(0, 1000))
def test_more_motion_never_lowers_weight(bump, seed):
    rng = np.random.default_rng(seed)
    imgs = rng.uniform(0.2, 0.5, size=(3, 2, 2, 3))
    # frame 1 is the brightest at the pixel, so raising it widens every difference
    imgs[1, 0, 0] = imgs[:, 0, 0].max(axis=0)
    base = weight_maps(frames_from(imgs), window=3)[1].weights[0, 0]
    moved = imgs.copy()
    moved[1, 0, 0] += bump
    assert weight_maps(frames_from(moved), window=3)[1].weights[0, 0] >= base


# --- drawing ---------------------------------------------------------------------------------

def test_single_positive_pixel(rng):
    w = np.zeros((2, 3, 3))
    w[1, 2, 0] = 0.4
    f, r, c = draw_batch(maps_of(w), 500, rng)
    assert set(zip(f, r, c)) == {(1, 2, 0)}


def test_one_to_three_ratio(rng):
    w = np.zeros((1, 1, 2))
    w[0, 0] = [1.0, 3.0]
    _, _, c = draw_batch(maps_of(w), 1_000_000, rng)
    frac = np.bincount(c, minlength=2) / c.size
    assert abs(frac[0] - 0.25) <= 0.02 * 0.25
    assert abs(frac[1] - 0.75) <= 0.02 * 0.75


def test_all_zero_rejected(rng):
    with pytest.raises(ContractViolation):
        draw_batch(maps_of(np.zeros((2, 2, 2))), 4, rng)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_support_matches_positive_weights(seed):
    rng = np.random.default_rng(seed)
    w = rng.uniform(size=(2, 4, 4)) * (rng.uniform(size=(2, 4, 4)) > 0.6)
    if not w.any():
        w[0, 0, 0] = 1.0
    f, r, c = draw_batch(maps_of(w), 2000, rng)
    assert np.all(w[f, r, c] > 0)


def test_scaling_weights_leaves_draws_unchanged():
    w = np.random.default_rng(3).uniform(size=(3, 5, 5))
    a = draw_batch(maps_of(w), 1000, np.random.default_rng(9))
    b = draw_batch(maps_of(w * 8.0), 1000, np.random.default_rng(9))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_toy_tool_pixels_never_drawn(rng):
    maps = weight_maps(three_frame_toy(), alpha=0.1, beta=1.0, window=2)
    f, r, c = draw_batch(maps, 50_000, rng)
    masks = np.stack([fr.mask for fr in three_frame_toy()])
    assert np.all(masks[f, r, c] == 1.0)


# --- caching / export ---------------------------------------------------------------------------

def test_cache_round_trip(tmp_path):
    frames = three_frame_toy()
    first = cached_weight_maps(frames, 0.1, 1.0, 2, cache_dir=tmp_path)
    files = list(tmp_path.glob("*.npy"))
    assert len(files) == 1
    again = cached_weight_maps(frames, 0.1, 1.0, 2, cache_dir=tmp_path)
    for a, b in zip(first, again):
        np.testing.assert_array_equal(a.weights, b.weights)
    cached_weight_maps(frames, 0.2, 1.0, 2, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("*.npy"))) == 2


def test_export_weight_maps(tmp_path):
    export_weight_maps(weight_maps(three_frame_toy(), window=2), tmp_path)
    img = np.array(Image.open(tmp_path / "000001.png"))
    assert img.dtype == np.uint8 and img.max() == 255 and img[:, 0].max() == 0
