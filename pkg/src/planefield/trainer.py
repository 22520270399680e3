"""Optimization loop: Adam, cosine schedule with linear warm-up, depth warm-up,
metrics logging and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"PLNF0001"                     8-byte magic / version
    uint64 header length, then UTF-8 JSON header
    float64 blobs in header["tensors"] order
    uint32 CRC32 of everything above
"""

import csv
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from ._validation import CheckpointError, ContractViolation, NumericFault, require
from .data import CameraModel, ndc_bounds
from .field import PlaneField
from .losses import DepthLossConfig, LossWeights, total_loss
from .pixsampler import cached_weight_maps, draw_batch
from .render import RayBatch, ndc_rays, render_image, render_rays

logger = logging.getLogger(__name__)

MAGIC = b"PLNF0001"
LOG_COLUMNS = ("iter", "lr", "total", "color", "depth", "tv_space", "tv_st", "smooth",
               "tinv", "hist", "seconds")


@dataclass
class TrainConfig:
    iters: int = 9000
    batch_rays: int = 2048
    lr_init: float = 0.01
    lr_warmup_iters: int = None          # None -> min(512, iters // 4)
    lr_floor_ratio: float = 0.01
    feat_dim: int = 32
    oneblob_bins: int = 16
    huber_delta: float = 0.2
    sampler_alpha: float = 0.1
    sampler_beta: float = 1.0
    sampler_window: int = 25
    sampler_mode: str = "max"
    resolutions: tuple = (64, 128, 256, 512)
    samplenet_resolutions: tuple = (128, 256)
    n_coarse: int = 64
    n_fine: int = 32
    decoder_width: int = 64
    decoder_layers: int = 2
    samplenet_width: int = 32
    samplenet_layers: int = 1
    w_color: float = 1.0
    w_depth: float = 1.0
    w_tv_space: float = 2e-3
    w_tv_spacetime: float = 2e-3
    w_smooth_time: float = 1e-3
    w_time_invariant: float = 1e-4
    w_histogram: float = 1.0
    samplenet_photometric: bool = False
    freeze_dynamic: bool = False
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        self.samplenet_resolutions = tuple(int(r) for r in self.samplenet_resolutions)
        if self.lr_warmup_iters is None:
            self.lr_warmup_iters = min(512, self.iters // 4)
        require(self.iters > 0 and self.batch_rays > 0, "iters and batch_rays must be positive")
        require(0 <= self.lr_warmup_iters < self.iters, "lr_warmup_iters must be below iters")
        require(self.lr_init > 0 and 0 < self.lr_floor_ratio <= 1, "invalid learning rate settings")
        require(self.feat_dim > 0 and self.oneblob_bins >= 2, "invalid feature / encoding sizes")
        require(self.huber_delta > 0, "huber_delta must be positive")
        require(self.sampler_alpha > 0 and self.sampler_beta > 0 and self.sampler_window >= 1,
                "invalid sampler settings")
        require(self.n_coarse >= 2 and self.n_fine >= 2, "need at least 2 samples per ray")
        require(len(self.resolutions) > 0, "need at least one resolution level")
        require(self.checkpoint_every > 0, "checkpoint_every must be positive")

    @property
    def loss_weights(self):
        return LossWeights(self.w_color, self.w_depth, self.w_tv_space, self.w_tv_spacetime,
                           self.w_smooth_time, self.w_time_invariant, self.w_histogram)

    def to_dict(self):
        d = asdict(self)
        d["resolutions"] = list(self.resolutions)
        d["samplenet_resolutions"] = list(self.samplenet_resolutions)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ContractViolation(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def preset(cls, name, **overrides):
        iters = {"9k": 9000, "32k": 32000}.get(name)
        if iters is None:
            raise ContractViolation(f"unknown preset {name!r}; expected 9k or 32k")
        return cls(**dict({"iters": iters}, **overrides))


def _parse_value(name, raw, kind):
    raw = raw.strip()
    if name in ("resolutions", "samplenet_resolutions"):
        return tuple(int(v) for v in raw.replace(",", " ").split()) if raw else ()
    if name == "lr_warmup_iters" and raw.lower() in ("", "none", "auto"):
        return None
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ContractViolation(f"config: {name} expects a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ContractViolation(f"config: {name} expects {kind.__name__}, got {raw!r}") from None


_FIELD_TYPES = {
    f.name: (int if f.name == "lr_warmup_iters" else type(f.default)) for f in fields(TrainConfig)
}


def read_config_file(path):
    """Parse ``key = value`` lines (``#`` comments); lists are comma separated."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"config line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ContractViolation(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, _FIELD_TYPES[key])
    return values


def write_config_file(config, path):
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, (list, tuple)):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def lr_at(it, config):
    """Linear ramp 0 -> lr_init, then cosine decay to lr_init * lr_floor_ratio."""
    warm = config.lr_warmup_iters
    if it < warm:
        return config.lr_init * it / warm
    floor = config.lr_init * config.lr_floor_ratio
    span = max(config.iters - 1 - warm, 1)
    progress = min((it - warm) / span, 1.0)
    return floor + 0.5 * (config.lr_init - floor) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, lr):
    """Bias-corrected Adam update in place; ``params`` is a list of (name, Tensor)."""
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericFault(f"non-finite gradient in parameter group '{name}'")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractViolation(f"adam: gradient shape {g.shape} != parameter {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class SceneModel:
    """Full plane field plus one single-resolution sample-net per proposal stage."""

    def __init__(self, config, n_frames):
        self.n_frames = int(n_frames)
        c = config
        self.field = PlaneField(c.resolutions, c.feat_dim, c.oneblob_bins, c.decoder_width,
                                c.decoder_layers, n_frames, c.seed, c.freeze_dynamic)
        self.sample_nets = [
            PlaneField((res,), c.feat_dim, c.oneblob_bins, c.samplenet_width, c.samplenet_layers,
                       n_frames, c.seed + 100 * (k + 1), c.freeze_dynamic)
            for k, res in enumerate(c.samplenet_resolutions)
        ]

    def named_tensors(self):
        out = self.field.named_tensors("model")
        for k, net in enumerate(self.sample_nets):
            out += net.named_tensors(f"samplenet{k}")
        return out

    def parameters(self):
        return [(n, t) for n, t in self.named_tensors() if t.requires_grad]

    def fieldsets(self):
        return [self.field.fieldset] + [n.fieldset for n in self.sample_nets]


@dataclass
class TrainState:
    config: TrainConfig
    model: SceneModel
    adam: AdamState
    iteration: int
    camera: CameraModel
    times: np.ndarray


class Trainer:
    def __init__(self, config, dataset, state=None, cache_dir=None):
        self.config = config
        self.dataset = dataset
        if state is None:
            state = TrainState(config, SceneModel(config, dataset.n_frames), AdamState(), 0,
                               dataset.camera, dataset.times)
        self.state = state
        h, w = dataset.shape
        self.width = w
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        self.origins, self.directions = ndc_rays(dataset.camera, rows.ravel(), cols.ravel())
        self.images = dataset.images()
        self.times = dataset.times
        self.maps = cached_weight_maps(dataset.frames, config.sampler_alpha, config.sampler_beta,
                                       config.sampler_window, config.sampler_mode, cache_dir)
        if dataset.depths is not None:
            depth = np.stack(dataset.depths)
            self.depth_valid = (depth > 0) & (dataset.masks() > 0.5)
            ndc = ndc_bounds(dataset)
            self.depth_t = np.where(self.depth_valid, ndc.depth_to_t(np.where(depth > 0, depth, 1.0)), 0.0)
        else:
            self.depth_valid = self.depth_t = None

    @property
    def model(self):
        return self.state.model

    @property
    def iteration(self):
        return self.state.iteration

    def depth_enabled(self, it):
        return it < self.config.iters / 2

    def _batch(self, rng):
        f, r, c = draw_batch(self.maps, self.config.batch_rays, rng)
        pix = r * self.width + c
        rays = RayBatch(self.origins[pix], self.directions[pix], self.times[f])
        rgb = self.images[f, r, c]
        if self.depth_t is None:
            return rays, rgb, None, None
        return rays, rgb, self.depth_t[f, r, c], self.depth_valid[f, r, c]

    def _forward(self, it, depth_on):
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, it])
        rays, rgb, depth, valid = self._batch(rng)
        fine, coarse = render_rays(self.model.field, self.model.sample_nets, rays,
                                   cfg.n_coarse, cfg.n_fine, rng)
        return total_loss(fine, coarse, rgb, depth, valid, self.model.fieldsets(),
                          cfg.loss_weights, DepthLossConfig(cfg.huber_delta, depth_on),
                          cfg.samplenet_photometric)

    def _gradients(self, it, depth_on):
        params = self.model.parameters()
        with dg.graph():
            dg.backward(self._forward(it, depth_on).total)
        grads = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for _, p in params]
        for _, p in params:
            p.grad = None
        return grads

    def depth_gradient_norm(self, it):
        """Norm of the gradient the depth term contributes to the loss used at ``it``.

        Measured as the difference between the gradient of that loss and the
        gradient of the same batch with the depth term switched off.
        """
        used = self._gradients(it, self.depth_enabled(it))
        without = self._gradients(it, False)
        return float(np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(used, without))))

    def train_step(self, instrument=False):
        it = self.state.iteration
        t0 = time.perf_counter()
        depth_on = self.depth_enabled(it)
        metrics = {}
        if instrument:
            metrics["depth_grad_norm"] = self.depth_gradient_norm(it)
        params = self.model.parameters()
        with dg.graph():
            terms = self._forward(it, depth_on)
            dg.backward(terms.total)
        if instrument:
            metrics["samplenet_grad_norm"] = _grad_norm(params, "samplenet")
            metrics["model_grad_norm"] = _grad_norm(params, "model")
        lr = lr_at(it, self.config)
        adam_step(params, self.state.adam, lr)
        for _, p in params:
            p.grad = None
        self.state.iteration += 1
        metrics.update(terms.parts)
        metrics.update(iter=it, lr=lr, depth_enabled=depth_on,
                       seconds=time.perf_counter() - t0)
        for k in LOG_COLUMNS:
            v = metrics[k]
            if not math.isfinite(v):
                raise NumericFault(f"non-finite {k} at iteration {it}")
        return metrics

    def render_frame(self, index, chunk=2048):
        """Deterministic render of training frame ``index``: ``(rgb, depth_t)``."""
        cfg = self.config
        return render_image(self.model.field, self.model.sample_nets, self.dataset.camera,
                            self.times[index], cfg.n_coarse, cfg.n_fine, chunk)

    def fit(self, iters=None, log_path=None, checkpoint_dir=None, callback=None):
        """Train up to ``iters`` total iterations (default: config.iters)."""
        stop = self.config.iters if iters is None else min(iters, self.config.iters)
        writer = None
        fh = None
        if log_path is not None:
            log_path = Path(log_path)
            new = not log_path.exists()
            fh = open(log_path, "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(LOG_COLUMNS)
        history = []
        try:
            while self.state.iteration < stop:
                m = self.train_step()
                history.append(m)
                if writer is not None:
                    writer.writerow([m[k] for k in LOG_COLUMNS])
                if callback is not None:
                    callback(m)
                done = self.state.iteration
                if checkpoint_dir is not None and (done % self.config.checkpoint_every == 0
                                                   or done == stop):
                    save_checkpoint(self.state, Path(checkpoint_dir) / f"ckpt_{done:06d}.plnf")
        finally:
            if fh is not None:
                fh.close()
        return history


def _grad_norm(params, prefix):
    return math.sqrt(sum(float(np.sum(p.grad ** 2)) for n, p in params
                         if n.startswith(prefix) and p.grad is not None))


# ---------------------------------------------------------------------------
# checkpoints


def _state_tensors(state):
    named = state.model.named_tensors()
    out = [(n, t.data) for n, t in named]
    for n, t in named:
        if n in state.adam.m:
            out.append(("adam.m." + n, state.adam.m[n]))
            out.append(("adam.v." + n, state.adam.v[n]))
    return out


def checkpoint_bytes(state):
    tensors = _state_tensors(state)
    header = {
        "version": 1,
        "config": state.config.to_dict(),
        "iteration": int(state.iteration),
        "adam": {"step": state.adam.step, "beta1": state.adam.beta1,
                 "beta2": state.adam.beta2, "eps": state.adam.eps},
        "rng": {"kind": "PCG64", "seed_sequence": [state.config.seed, int(state.iteration)]},
        "camera": state.camera.to_dict(),
        "times": [float(t) for t in state.times],
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<Q", len(head))
    body += head
    for _, a in tensors:
        body += np.ascontiguousarray(a, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def save_checkpoint(state, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: unsupported checkpoint version or not a checkpoint")
    if len(raw) < len(MAGIC) + 12:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported header version {header.get('version')}")

    config = TrainConfig.from_dict(header["config"])
    times = np.asarray(header["times"], dtype=np.float64)
    model = SceneModel(config, len(times))
    adam = AdamState(header["adam"]["beta1"], header["adam"]["beta2"], header["adam"]["eps"],
                     header["adam"]["step"])
    named = dict(model.named_tensors())
    offset = 16 + hlen
    end = len(raw) - 4
    for spec in header["tensors"]:
        name, shape = spec["name"], tuple(spec["shape"])
        n = int(np.prod(shape)) * 8
        if offset + n > end:
            raise CheckpointError(f"{path}: truncated tensor data at {name}")
        arr = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=offset).reshape(shape).copy()
        offset += n
        if name.startswith("adam.m."):
            adam.m[name[7:]] = arr
        elif name.startswith("adam.v."):
            adam.v[name[7:]] = arr
        elif name in named:
            if named[name].data.shape != shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            named[name].data[...] = arr
        else:
            raise CheckpointError(f"{path}: unknown tensor {name}")
    if offset != end:
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return TrainState(config, model, adam, int(header["iteration"]),
                      CameraModel.from_dict(header["camera"]), times)
