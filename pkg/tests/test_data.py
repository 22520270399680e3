import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from planefield._validation import ContractViolation, DatasetError
from planefield.data import (BlobSpec, CameraModel, SynthSpec, load_dataset, ndc_bounds,
                             normalize_times, save_dataset, synth_scene)
from planefield.metrics import psnr
from planefield.pixsampler import occlusion_scale, weight_maps
from planefield.render import composite, ndc_rays, stratified_samples

META = {"fx": 4.0, "fy": 4.0, "cx": 2.0, "cy": 1.5, "width": 4, "height": 3, "near": 0.5,
        "depth_scale": 0.001, "fps": 25.0}


def write_capture(root, n=2, meta=None, mask_value=0, depth_value=1000, size=(3, 4)):
    for sub in ("images", "masks", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    h, w = size
    for i in range(n):
        name = f"{i:06d}.png"
        Image.fromarray(np.full((h, w, 3), 40 * (i + 1), np.uint8), "RGB").save(root / "images" / name)
        Image.fromarray(np.full((h, w), mask_value, np.uint8), "L").save(root / "masks" / name)
        Image.fromarray(np.full((h, w), depth_value, np.uint16)).save(root / "depth" / name)
    (root / "meta.json").write_text(json.dumps(meta if meta is not None else META))


# --- ingestion ---------------------------------------------------------------------------

def test_minimal_two_frames(tmp_path):
    write_capture(tmp_path)
    ds = load_dataset(tmp_path)
    np.testing.assert_array_equal(ds.times, [-1.0, 1.0])
    assert ds.shape == (3, 4)
    np.testing.assert_allclose(ds.frames[1].image, 80 / 255)
    assert ds.camera.near == 0.5


def test_depth_scale(tmp_path):
    write_capture(tmp_path, depth_value=1000)
    ds = load_dataset(tmp_path)
    np.testing.assert_allclose(ds.depths[0], 1.0, rtol=1e-15)


def test_mask_threshold_and_convention(tmp_path):
    write_capture(tmp_path, mask_value=127)
    assert np.all(load_dataset(tmp_path).masks() == 1.0)
    write_capture(tmp_path, mask_value=128)
    assert np.all(load_dataset(tmp_path).masks() == 0.0)


def test_fully_occluded_frame_warns(tmp_path, caplog):
    write_capture(tmp_path, n=3)
    Image.fromarray(np.full((3, 4), 255, np.uint8), "L").save(tmp_path / "masks" / "000001.png")
    with caplog.at_level(logging.WARNING):
        ds = load_dataset(tmp_path)
    assert "fully occluded" in caplog.text
    omega = occlusion_scale(ds.masks(), 1.0)
    np.testing.assert_array_equal(omega[1], 0.0)


def test_explicit_timestamps(tmp_path):
    write_capture(tmp_path, n=3, meta=dict(META, timestamps=[0.0, 0.1, 0.4]))
    np.testing.assert_allclose(load_dataset(tmp_path).times, [-1.0, -0.5, 1.0])


def test_every_failure_is_reported(tmp_path):
    write_capture(tmp_path, n=3, meta=dict(META, timestamps=[0.0, 0.2, 0.1]))
    (tmp_path / "masks" / "000002.png").unlink()
    Image.fromarray(np.zeros((5, 5, 3), np.uint8), "RGB").save(tmp_path / "images" / "000001.png")
    with pytest.raises(DatasetError) as info:
        load_dataset(tmp_path)
    text = " | ".join(info.value.failures)
    assert "missing mask" in text
    assert "resolution" in text
    assert "not strictly increasing" in text
    assert len(info.value.failures) >= 3


def test_unreadable_meta(tmp_path):
    write_capture(tmp_path)
    (tmp_path / "meta.json").write_text("{not json")
    with pytest.raises(DatasetError, match="meta.json"):
        load_dataset(tmp_path)


def test_missing_meta_keys(tmp_path):
    meta = dict(META)
    del meta["fps"]
    write_capture(tmp_path, meta=meta)
    with pytest.raises(DatasetError, match="fps"):
        load_dataset(tmp_path)


def test_multi_pose_rejected(tmp_path):
    write_capture(tmp_path, meta=dict(META, poses=[np.eye(4).tolist()] * 2))
    with pytest.raises(DatasetError, match="single viewpoint"):
        load_dataset(tmp_path)


def test_save_load_round_trip(tmp_path, small_scene):
    ds, _ = small_scene
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.n_frames == ds.n_frames
    np.testing.assert_allclose(back.images(), ds.images(), atol=0.5 / 255 + 1e-12)
    np.testing.assert_array_equal(back.masks(), ds.masks())
    np.testing.assert_allclose(back.times, ds.times, atol=1e-12)
    for a, b in zip(back.depths, ds.depths):
        np.testing.assert_allclose(a, b, atol=0.5 * ds.depth_scale + 1e-12)


# --- times and NDC -----------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 200), rate=st.floats(0.5, 120))
def test_time_normalization_endpoints(n, rate):
    t = normalize_times(np.arange(n) / rate)
    assert t.min() == -1.0 and t.max() == 1.0
    assert np.all(np.diff(t) > 0)


def test_ndc_near_plane_and_infinity():
    cam = CameraModel(10, 10, 5, 5, 10, 10, near=0.8)
    ndc = ndc_bounds(cam)
    assert ndc.world_to_ndc([0.3, -0.2, -0.8])[2] == pytest.approx(-1.0)
    assert ndc.world_to_ndc([0.0, 0.0, -1e12])[2] == pytest.approx(1.0, abs=1e-11)


def test_visible_frustum_maps_into_cube():
    cam = CameraModel(10, 10, 5, 5, 10, 10, near=1.0)
    rows, cols = np.meshgrid(np.arange(10), np.arange(10), indexing="ij")
    o, d = ndc_rays(cam, rows.ravel(), cols.ravel())
    for t in (0.0, 0.5, 0.999):
        assert np.all(np.abs(o + t * d) <= 1.0)


def test_depth_round_trip(rng):
    ndc = ndc_bounds(CameraModel(10, 10, 5, 5, 10, 10, near=0.3))
    depth = rng.uniform(0.3, 500.0, size=1000)
    np.testing.assert_allclose(ndc.t_to_depth(ndc.depth_to_t(depth)), depth, rtol=1e-9)


def test_ndc_rejects_non_positive_near():
    class Cam:
        fx = fy = 1.0
        width = height = 2
        near = 0.0
    with pytest.raises(ContractViolation):
        ndc_bounds(Cam())


# --- synthetic scenes ------------------------------------------------------------------------

def test_vacuum_scene():
    ds, _ = synth_scene(SynthSpec(width=8, height=8, frames=2, focal=8, blobs=[], tool=False))
    assert np.all(ds.images() == 0)
    assert all(np.all(d == 0) for d in ds.depths)


def test_static_blob_frames_identical(static_scene):
    ds, _ = static_scene
    imgs = ds.images()
    assert np.all(imgs == imgs[0])
    for m in weight_maps(ds.frames, alpha=0.1, beta=1.0, window=3):
        np.testing.assert_allclose(m.weights, 0.1, rtol=1e-15)


def test_axial_blob_brightest_at_principal_point():
    blob = BlobSpec(start=(0, 0, -2.0), end=(0, 0, -2.0), std=0.3, peak=3.0, color=(1, 1, 1))
    ds, _ = synth_scene(SynthSpec(width=13, height=13, frames=1, focal=13.0, blobs=[blob], tool=False))
    lum = ds.images()[0].sum(axis=-1)
    assert np.unravel_index(np.argmax(lum), lum.shape) == (6, 6)


def test_tool_bar_sweeps(small_scene):
    ds, _ = small_scene
    masks = ds.masks()
    cols = [np.flatnonzero(m.min(axis=0) == 0) for m in masks]
    assert cols[0][0] == 0 and cols[-1][-1] == ds.shape[1] - 1
    assert all(np.all(m[:, c] == 0) for m, c in zip(masks, cols))


def test_oracle_composite_reproduces_images(small_scene):
    ds, oracle = small_scene
    cam = ds.camera
    rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    o, d = ndc_rays(cam, rows.ravel(), cols.ravel())
    n = 4096
    t, delta = stratified_samples(n, o.shape[0])
    for i, frame in enumerate(ds.frames):
        pts = o[:, None, :] + t[..., None] * d[:, None, :]
        sigma, color = oracle.query(pts[..., 0], pts[..., 1], pts[..., 2], frame.time)
        out = composite(sigma, color.reshape(-1, 3), t, delta)
        img = out.color.data.reshape(cam.height, cam.width, 3)
        assert psnr(img, frame.image, frame.mask) >= 40.0
