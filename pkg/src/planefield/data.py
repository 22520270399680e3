"""Dataset ingestion, NDC / time normalization and a synthetic moving-blob scene.

On-disk layout::

    DIR/images/000000.png   8-bit RGB
    DIR/masks/000000.png    8-bit gray, 255 = tool, 0 = tissue
    DIR/depth/000000.png    16-bit gray, metric = value * depth_scale, 0 = invalid
    DIR/meta.json           fx, fy, cx, cy, width, height, near, depth_scale, fps
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.special import erf

from ._validation import ContractViolation, DatasetError, require

logger = logging.getLogger(__name__)

META_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "near", "depth_scale", "fps")


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 1.0
    c2w: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        require(self.fx > 0 and self.fy > 0, "camera focal lengths must be positive")
        require(self.near > 0, "camera near bound must be positive")
        require(self.width > 0 and self.height > 0, "camera size must be positive")
        self.c2w = np.asarray(self.c2w, dtype=np.float64)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "near": self.near}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), float(d["near"]))


@dataclass
class MaskedFrame:
    image: np.ndarray          # H x W x 3 in [0, 1]
    mask: np.ndarray           # H x W, 1 = tissue visible, 0 = tool
    time: float

    def __post_init__(self):
        require(self.image.ndim == 3 and self.image.shape[2] == 3,
                f"frame image must be HxWx3, got {self.image.shape}")
        require(self.mask.shape == self.image.shape[:2],
                f"mask shape {self.mask.shape} does not match image {self.image.shape[:2]}")


@dataclass
class Dataset:
    frames: list
    camera: CameraModel
    depths: list = None        # metric depth maps (0 = invalid) or None
    depth_scale: float = 0.001
    fps: float = 30.0

    def __post_init__(self):
        failures = self.validate()
        if failures:
            raise DatasetError(failures)

    def validate(self):
        failures = []
        if not self.frames:
            return ["dataset has no frames"]
        shape = self.frames[0].image.shape
        for i, f in enumerate(self.frames):
            if f.image.shape != shape:
                failures.append(f"frame {i}: resolution {f.image.shape[:2]} != {shape[:2]}")
        if shape[:2] != (self.camera.height, self.camera.width):
            failures.append(f"camera size {self.camera.width}x{self.camera.height} "
                            f"does not match frames {shape[1]}x{shape[0]}")
        times = self.times
        if len(times) > 1:
            if np.any(np.diff(times) <= 0):
                failures.append("frame times are not strictly increasing")
            elif times[0] != -1.0 or times[-1] != 1.0:
                failures.append("frame times must span [-1, 1]")
        if self.depths is not None and len(self.depths) != len(self.frames):
            failures.append("depth map count does not match frame count")
        return failures

    @property
    def times(self):
        return np.array([f.time for f in self.frames])

    @property
    def n_frames(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames[0].image.shape[:2]

    def images(self):
        return np.stack([f.image for f in self.frames])

    def masks(self):
        return np.stack([f.mask for f in self.frames])


def normalize_times(raw):
    """Map raw timestamps affinely onto [-1, 1]; a single frame sits at 0."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 1:
        return np.zeros(1)
    out = -1.0 + 2.0 * (raw - raw[0]) / (raw[-1] - raw[0])
    out[0], out[-1] = -1.0, 1.0
    return out


@dataclass(frozen=True)
class NDCMapping:
    """Forward-facing NDC warp for a camera looking down -z."""

    fx: float
    fy: float
    width: int
    height: int
    near: float

    def world_to_ndc(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
        return np.stack([-self.fx / (self.width / 2) * x / z,
                         -self.fy / (self.height / 2) * y / z,
                         1.0 + 2.0 * self.near / z], axis=-1)

    def ndc_to_world(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        z = 2.0 * self.near / (pts[..., 2] - 1.0)
        x = -pts[..., 0] * z * (self.width / 2) / self.fx
        y = -pts[..., 1] * z * (self.height / 2) / self.fy
        return np.stack([x, y, z], axis=-1)

    def depth_to_t(self, depth):
        """Metric z-depth to NDC ray parameter t in [0, 1)."""
        return 1.0 - self.near / np.asarray(depth, dtype=np.float64)

    def t_to_depth(self, t):
        return self.near / (1.0 - np.asarray(t, dtype=np.float64))


def ndc_bounds(dataset_or_camera):
    cam = getattr(dataset_or_camera, "camera", dataset_or_camera)
    if cam.near <= 0:
        raise ContractViolation("ndc_bounds: near bound must be positive")
    return NDCMapping(cam.fx, cam.fy, cam.width, cam.height, cam.near)


# ---------------------------------------------------------------------------
# disk format


def _read_png(path):
    with Image.open(path) as im:
        return np.array(im)


def load_dataset(path):
    """Load and validate a capture directory; every problem is reported at once."""
    root = Path(path)
    failures = []
    meta = None
    try:
        meta = json.loads((root / "meta.json").read_text())
        missing = [k for k in META_KEYS if k not in meta]
        if missing:
            failures.append(f"meta.json missing keys: {', '.join(missing)}")
            meta = None
    except (OSError, json.JSONDecodeError) as exc:
        failures.append(f"unreadable meta.json: {exc}")

    image_files = sorted((root / "images").glob("*.png"))
    if not image_files:
        failures.append("no images found in images/")
    has_depth = (root / "depth").is_dir()

    images, masks, depths = [], [], []
    for img_path in image_files:
        name = img_path.name
        mask_path = root / "masks" / name
        depth_path = root / "depth" / name
        try:
            img = _read_png(img_path)
            if img.ndim != 3 or img.shape[2] < 3:
                failures.append(f"{name}: image is not RGB")
                continue
            images.append(img[..., :3].astype(np.float64) / 255.0)
        except OSError as exc:
            failures.append(f"{name}: unreadable image ({exc})")
            continue
        if not mask_path.exists():
            failures.append(f"{name}: missing mask")
        else:
            m = _read_png(mask_path)
            if m.ndim == 3:
                m = m[..., 0]
            masks.append((m < 128).astype(np.float64))
        if has_depth:
            if not depth_path.exists():
                failures.append(f"{name}: missing depth map")
            else:
                depths.append(_read_png(depth_path).astype(np.float64))

    if images:
        h, w = images[0].shape[:2]
        for img_path, img in zip(image_files, images):
            if img.shape[:2] != (h, w):
                failures.append(f"{img_path.name}: resolution {img.shape[1]}x{img.shape[0]} != {w}x{h}")
        for m in masks:
            if m.shape != (h, w):
                failures.append(f"mask resolution {m.shape[1]}x{m.shape[0]} != {w}x{h}")
                break
        if meta is not None and (int(meta["width"]), int(meta["height"])) != (w, h):
            failures.append(f"meta size {meta['width']}x{meta['height']} != images {w}x{h}")

    raw_times = None
    if meta is not None:
        if "timestamps" in meta:
            raw_times = np.asarray(meta["timestamps"], dtype=np.float64)
            if raw_times.size != len(image_files):
                failures.append("timestamps length does not match frame count")
            elif raw_times.size > 1 and np.any(np.diff(raw_times) <= 0):
                failures.append("timestamps are not strictly increasing")
        else:
            fps = float(meta["fps"])
            if fps <= 0:
                failures.append("fps must be positive")
            raw_times = np.arange(len(image_files)) / max(fps, 1e-12)
        if len(meta.get("poses", [])) > 1:
            failures.append("multiple camera poses are not supported (single viewpoint only)")
        if float(meta["near"]) <= 0:
            failures.append("near must be positive")
        if float(meta["fx"]) <= 0 or float(meta["fy"]) <= 0:
            failures.append("focal lengths must be positive")

    if failures:
        raise DatasetError(failures)

    camera = CameraModel(float(meta["fx"]), float(meta["fy"]), float(meta["cx"]),
                         float(meta["cy"]), int(meta["width"]), int(meta["height"]),
                         float(meta["near"]))
    times = normalize_times(raw_times)
    scale = float(meta["depth_scale"])
    frames = []
    for i, (img, m) in enumerate(zip(images, masks)):
        if not m.any():
            logger.warning("frame %d is fully occluded by tools", i)
        frames.append(MaskedFrame(img, m, float(times[i])))
    return Dataset(frames, camera, [d * scale for d in depths] if has_depth else None,
                   depth_scale=scale, fps=float(meta["fps"]))


def save_dataset(dataset, path):
    root = Path(path)
    for sub in ("images", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    if dataset.depths is not None:
        (root / "depth").mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(dataset.frames):
        name = f"{i:06d}.png"
        rgb = np.clip(np.round(f.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(root / "images" / name)
        tool = np.where(f.mask > 0.5, 0, 255).astype(np.uint8)
        Image.fromarray(tool, "L").save(root / "masks" / name)
        if dataset.depths is not None:
            raw = np.clip(np.round(dataset.depths[i] / dataset.depth_scale), 0, 65535)
            Image.fromarray(raw.astype(np.uint16)).save(root / "depth" / name)
    cam = dataset.camera
    meta = dict(cam.to_dict(), depth_scale=dataset.depth_scale, fps=dataset.fps)
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# synthetic scene


@dataclass
class BlobSpec:
    start: tuple               # world-space center at tau = -1
    end: tuple                 # world-space center at tau = +1
    std: float = 0.3
    peak: float = 6.0          # peak density, world units
    color: tuple = (1.0, 1.0, 1.0)


@dataclass
class SynthSpec:
    width: int = 32
    height: int = 32
    frames: int = 20
    focal: float = 32.0
    near: float = 1.0
    blobs: list = None
    tool: bool = True
    tool_color: float = 0.5
    depth_scale: float = 0.001
    min_depth_opacity: float = 0.5

    def __post_init__(self):
        if self.blobs is None:
            self.blobs = default_blobs()


def default_blobs():
    return [
        BlobSpec(start=(-0.35, 0.25, -2.6), end=(-0.35, 0.25, -2.6), std=0.38,
                 peak=5.0, color=(0.9, 0.35, 0.25)),
        BlobSpec(start=(-0.55, -0.25, -2.0), end=(0.55, -0.15, -2.0), std=0.26,
                 peak=7.0, color=(0.2, 0.55, 0.95)),
    ]


def jittered_blobs(rng, scale=0.1):
    """The default blobs with positions and colors perturbed by ``rng``."""
    out = []
    for b in default_blobs():
        shift = rng.uniform(-scale, scale, 3) * np.array([1.0, 1.0, 2.0])
        color = np.clip(np.asarray(b.color) + rng.uniform(-scale, scale, 3), 0.05, 0.95)
        out.append(BlobSpec(tuple(np.asarray(b.start) + shift), tuple(np.asarray(b.end) + shift),
                            b.std, b.peak, tuple(color)))
    return out


class SceneOracle:
    """Exact density and color of a synthetic scene.

    ``query`` takes NDC coordinates and returns density per unit of NDC ray
    parameter t (for rays of the identity camera), so it can be fed straight
    into the compositor.
    """

    def __init__(self, spec, camera):
        self.spec = spec
        self.camera = camera
        self.ndc = ndc_bounds(camera)

    def centers(self, tau):
        s = (np.asarray(tau, dtype=np.float64) + 1.0) / 2.0
        return [np.asarray(b.start) + (np.asarray(b.end) - np.asarray(b.start)) * s[..., None]
                for b in self.spec.blobs]

    def query_world(self, pts, tau):
        pts = np.asarray(pts, dtype=np.float64)
        sig = np.zeros(pts.shape[:-1])
        col = np.zeros(pts.shape)
        for b, c in zip(self.spec.blobs, self.centers(np.broadcast_to(tau, pts.shape[:-1]))):
            d2 = np.sum((pts - c) ** 2, axis=-1)
            s = b.peak * np.exp(-d2 / (2 * b.std ** 2))
            sig += s
            col += s[..., None] * np.asarray(b.color)
        col = np.where(sig[..., None] > 0, col / np.maximum(sig, 1e-300)[..., None], 0.0)
        return sig, col

    def query(self, x, y, z, tau):
        x, y, z, tau = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, z, tau)))
        ndc_pts = np.stack([x, y, z], axis=-1)
        world = self.ndc.ndc_to_world(ndc_pts)
        sig, col = self.query_world(world, tau)
        # d(world arc length)/d(t) along an NDC ray with direction (0, 0, 2)
        t = (z + 1.0) / 2.0
        a = world[..., 0] / world[..., 2]
        b = world[..., 1] / world[..., 2]
        jac = self.camera.near / (1.0 - t) ** 2 * np.sqrt(1.0 + a * a + b * b)
        return sig * jac, col


def _render_synth_frame(spec, camera, centers, n_nodes=512):
    """Closed-form transmittance per blob (erf) with a fine quadrature for color."""
    h, w = camera.height, camera.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dirs = np.stack([(cols + 0.5 - camera.cx) / camera.fx,
                     -(rows + 0.5 - camera.cy) / camera.fy,
                     -np.ones_like(rows, dtype=np.float64)], axis=-1).reshape(-1, 3)
    norm = np.linalg.norm(dirs, axis=-1)
    u = dirs / norm[:, None]
    s0 = camera.near * norm
    reach = max(np.linalg.norm(c) + 6 * b.std for b, c in zip(spec.blobs, centers)) if spec.blobs else 1.0
    s1 = np.maximum(reach * np.ones_like(s0), s0 + 1e-6)
    frac = np.linspace(0.0, 1.0, n_nodes)
    s = s0[:, None] + (s1 - s0)[:, None] * frac[None, :]

    optical = np.zeros_like(s)
    dens = np.zeros_like(s)
    cdens = np.zeros(s.shape + (3,))
    for b, c in zip(spec.blobs, centers):
        sb = u @ c
        d2 = np.maximum(c @ c - sb * sb, 0.0)
        amp = b.peak * np.exp(-d2 / (2 * b.std ** 2))
        k = b.std * math.sqrt(2.0)
        optical += (amp * b.std * math.sqrt(math.pi / 2))[:, None] * (
            erf((s - sb[:, None]) / k) - erf((s0 - sb)[:, None] / k))
        sig = amp[:, None] * np.exp(-((s - sb[:, None]) ** 2) / (2 * b.std ** 2))
        dens += sig
        cdens += sig[..., None] * np.asarray(b.color)
    integrand_w = dens * np.exp(-optical)
    t_ndc = 1.0 - camera.near * norm[:, None] / s
    color = np.trapezoid(cdens * np.exp(-optical)[..., None], s[..., None], axis=1)
    opacity = 1.0 - np.exp(-optical[:, -1])
    depth_t = np.trapezoid(integrand_w * t_ndc, s, axis=1)
    return color.reshape(h, w, 3), depth_t.reshape(h, w), opacity.reshape(h, w)


def synth_scene(spec=None, rng=None):
    """Render a dynamic blob scene; returns ``(dataset, oracle)``.

    Depth maps carry the expected NDC depth converted to metric z-depth and
    are invalid (0) where accumulated opacity stays below
    ``spec.min_depth_opacity``. ``rng`` is accepted for interface symmetry;
    the scene itself is fully determined by ``spec``.
    """
    spec = spec or SynthSpec()
    camera = CameraModel(spec.focal, spec.focal, spec.width / 2, spec.height / 2,
                         spec.width, spec.height, spec.near)
    oracle = SceneOracle(spec, camera)
    ndc = oracle.ndc
    times = normalize_times(np.arange(spec.frames, dtype=np.float64))
    frames, depths = [], []
    bar = max(2, spec.width // 10)
    for i, tau in enumerate(times):
        centers = oracle.centers(np.asarray(tau))
        if spec.blobs:
            image, depth_t, opacity = _render_synth_frame(spec, camera, centers)
        else:
            image = np.zeros((spec.height, spec.width, 3))
            depth_t = opacity = np.zeros((spec.height, spec.width))
        depth = np.where(opacity >= spec.min_depth_opacity, ndc.t_to_depth(depth_t), 0.0)
        mask = np.ones((spec.height, spec.width))
        if spec.tool and spec.frames > 1:
            c0 = int(round(i / (spec.frames - 1) * (spec.width - bar)))
            mask[:, c0:c0 + bar] = 0.0
            image = image.copy()
            image[:, c0:c0 + bar] = spec.tool_color
            depth[:, c0:c0 + bar] = 0.0
        frames.append(MaskedFrame(np.clip(image, 0.0, 1.0), mask, float(tau)))
        depths.append(depth)
    return Dataset(frames, camera, depths, depth_scale=spec.depth_scale), oracle
