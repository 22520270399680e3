"""NDC rays, stratified and proposal-guided sampling, and volume compositing.

Sample sets are stored per ray as sorted parameters ``t`` with interval
lengths ``delta``; sample i owns ``[t_i, t_i + delta_i]`` so the bin edges
of a sample set are ``t`` followed by ``t_far``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffgraph as dg
from ._validation import ContractViolation, require

RESAMPLE_EPS = 1e-5
MIN_DELTA = 1e-12


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = 1.0
    pixel: tuple = (0, 0)
    time: float = 0.0

    def __post_init__(self):
        require(self.t_near < self.t_far, "ray: t_near must be below t_far")
        require(np.linalg.norm(self.direction) > 0, "ray: direction must be non-zero")

    def at(self, t):
        return self.origin + np.asarray(t)[..., None] * self.direction


@dataclass
class RayBatch:
    origins: np.ndarray      # (R, 3) NDC
    directions: np.ndarray   # (R, 3) NDC
    times: np.ndarray        # (R,)
    t_near: float = 0.0
    t_far: float = 1.0

    def __len__(self):
        return self.origins.shape[0]

    @classmethod
    def from_rays(cls, rays):
        return cls(np.stack([r.origin for r in rays]), np.stack([r.direction for r in rays]),
                   np.array([r.time for r in rays]), rays[0].t_near, rays[0].t_far)


@dataclass
class RenderOutput:
    color: dg.Tensor           # (R, 3)
    depth: dg.Tensor           # (R,) in NDC t units
    weights: dg.Tensor         # (R, S)
    transmittance: np.ndarray  # (R, S), light surviving up to each sample
    acc: dg.Tensor             # (R,) total opacity
    t: np.ndarray              # (R, S)
    edges: np.ndarray          # (R, S + 1)


def ndc_rays(camera, rows, cols):
    """Pinhole rays through pixel centres, warped to forward-facing NDC.

    Returns ``(origins, directions)``, each (n, 3); t in [0, 1] spans near
    plane to infinity.
    """
    rows = np.atleast_1d(np.asarray(rows, dtype=np.float64))
    cols = np.atleast_1d(np.asarray(cols, dtype=np.float64))
    dirs = np.stack([(cols + 0.5 - camera.cx) / camera.fx,
                     -(rows + 0.5 - camera.cy) / camera.fy,
                     -np.ones_like(rows)], axis=-1)
    rot, trans = camera.c2w[:3, :3], camera.c2w[:3, 3]
    d = dirs @ rot.T
    o = np.broadcast_to(trans, d.shape).copy()
    n = camera.near
    # shift origins onto the near plane
    t0 = -(n + o[:, 2]) / d[:, 2]
    o = o + t0[:, None] * d
    ax = -camera.fx / (camera.width / 2.0)
    ay = -camera.fy / (camera.height / 2.0)
    origins = np.stack([ax * o[:, 0] / o[:, 2], ay * o[:, 1] / o[:, 2], 1.0 + 2.0 * n / o[:, 2]], -1)
    directions = np.stack([ax * (d[:, 0] / d[:, 2] - o[:, 0] / o[:, 2]),
                           ay * (d[:, 1] / d[:, 2] - o[:, 1] / o[:, 2]),
                           -2.0 * n / o[:, 2]], -1)
    return origins, directions


def make_ray(camera, pixel, tau):
    row, col = pixel
    if not (0 <= row < camera.height and 0 <= col < camera.width):
        raise ContractViolation(f"make_ray: pixel {pixel} outside {camera.width}x{camera.height}")
    o, d = ndc_rays(camera, [row], [col])
    return Ray(o[0], d[0], 0.0, 1.0, (int(row), int(col)), float(tau))


def _deltas(t, t_far):
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = t_far - t[:, -1]
    return np.maximum(delta, MIN_DELTA)


def stratified_samples(n, n_rays=1, t_near=0.0, t_far=1.0, rng=None):
    """One draw per equal sub-interval (midpoints when ``rng`` is None).

    Returns ``(t, delta)``, each (n_rays, n).
    """
    if n < 2:
        raise ContractViolation("stratified_samples: need at least 2 samples")
    width = (t_far - t_near) / n
    lo = t_near + width * np.arange(n)
    u = np.full((n_rays, n), 0.5) if rng is None else rng.uniform(size=(n_rays, n))
    t = lo[None, :] + u * width
    return t, _deltas(t, t_far)


def resample_pdf(weights, edges, n_fine, rng=None):
    """Inverse-CDF draws from the piecewise-constant pdf given by per-bin weights.

    Weights are smoothed by ``RESAMPLE_EPS``; rows with no mass fall back to a
    uniform density. Draws are stratified in CDF space (midpoints when ``rng``
    is None) so the output is sorted ascending. Returns (R, n_fine).
    """
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    e = np.atleast_2d(np.asarray(edges, dtype=np.float64))
    if np.any(w < 0):
        raise ContractViolation("resample_pdf: negative weights")
    r, s = w.shape
    widths = np.diff(e, axis=1)
    empty = w.sum(axis=1) <= 0
    w = np.where(empty[:, None], widths, w) + RESAMPLE_EPS
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((r, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    jitter = np.full((r, n_fine), 0.5) if rng is None else rng.uniform(size=(r, n_fine))
    u = (np.arange(n_fine)[None, :] + jitter) / n_fine
    offs = 2.0 * np.arange(r)[:, None]
    pos = np.searchsorted((cdf + offs).ravel(), (u + offs).ravel(), side="right")
    bins = np.clip(pos.reshape(r, n_fine) - 1 - (s + 1) * np.arange(r)[:, None], 0, s - 1)
    rows = np.arange(r)[:, None]
    c_lo = cdf[rows, bins]
    p = pdf[rows, bins]
    frac = np.clip((u - c_lo) / p, 0.0, 1.0)
    t = e[rows, bins] + frac * widths[rows, bins]
    return np.maximum.accumulate(t, axis=1)


@lru_cache(maxsize=32)
def _exclusive_cumsum_matrix(s):
    return np.triu(np.ones((s, s)), k=1)


def composite(sigma, color, t, delta, t_far=1.0):
    """Exponential-transmittance quadrature of the volume rendering integrals.

    ``sigma`` (R, S) and ``color`` (R, S, 3) or (R*S, 3) may be Tensors or
    arrays; ``t`` and ``delta`` are (R, S) arrays.
    """
    sigma = sigma if isinstance(sigma, dg.Tensor) else dg.Tensor(np.atleast_2d(sigma))
    color = color if isinstance(color, dg.Tensor) else dg.Tensor(np.asarray(color, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    delta = np.atleast_2d(np.asarray(delta, dtype=np.float64))
    r, s = t.shape
    if sigma.shape != (r, s) or delta.shape != (r, s):
        raise ContractViolation(f"composite: sigma {sigma.shape}, delta {delta.shape}, t {t.shape}")
    if np.any(sigma.data < 0):
        raise ContractViolation("composite: negative density")
    if np.any(delta <= 0):
        raise ContractViolation("composite: non-positive interval length")
    if color.shape != (r * s, 3):
        color = dg.reshape(color, (r * s, 3))

    optical = dg.mul(sigma, dg.Tensor(delta))
    alpha = dg.sub(dg.Tensor(np.ones((r, s))), dg.exp(dg.neg(optical)))
    trans = dg.exp(dg.neg(dg.matmul(optical, dg.Tensor(_exclusive_cumsum_matrix(s)))))
    weights = dg.mul(trans, alpha)
    wflat = dg.reshape(weights, (r * s, 1))
    weighted = dg.mul(dg.concat([wflat, wflat, wflat]), color)
    rgb = dg.sum(dg.reshape(weighted, (r, s, 3)), axis=1)
    depth = dg.sum(dg.mul(weights, dg.Tensor(t)), axis=1)
    acc = dg.sum(weights, axis=1)
    edges = np.concatenate([t, np.full((r, 1), float(t_far))], axis=1)
    return RenderOutput(rgb, depth, weights, trans.data.copy(), acc, t, edges)


def sample_points(rays, t):
    """(R*S, 4) query points ``o + t d`` with the ray's time appended."""
    xyz = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    tau = np.broadcast_to(rays.times[:, None, None], t.shape + (1,))
    return np.concatenate([xyz, tau], axis=-1).reshape(-1, 4)


def render_samples(field, rays, t):
    """Query ``field`` at the given per-ray parameters and composite."""
    t = np.atleast_2d(t)
    sigma, color = field.query(sample_points(rays, t))
    sigma = dg.reshape(sigma, t.shape)
    return composite(sigma, color, t, _deltas(t, rays.t_far), rays.t_far)


def proposal_render(sample_net, rays, n_coarse, rng=None, previous=None):
    """Coarse pass of one sample-net stage.

    The first stage uses stratified samples; later stages resample from the
    previous stage's (detached) weights.
    """
    if previous is None:
        t, _ = stratified_samples(n_coarse, len(rays), rays.t_near, rays.t_far, rng)
    else:
        t = resample_pdf(previous.weights.data, previous.edges, n_coarse, rng)
    return render_samples(sample_net, rays, t)


def render_rays(model, sample_nets, rays, n_coarse=64, n_fine=32, rng=None, fine_t=None):
    """Proposal stage(s) then the full model on resampled points.

    Returns ``(fine, coarse_list)``. ``fine_t`` pins the fine sample
    parameters (used by gradient checks, where resampling is treated as a
    constant).
    """
    coarse = []
    prev = None
    for net in sample_nets:
        prev = proposal_render(net, rays, n_coarse, rng, prev)
        coarse.append(prev)
    if fine_t is None:
        if prev is None:
            fine_t, _ = stratified_samples(n_fine, len(rays), rays.t_near, rays.t_far, rng)
        else:
            fine_t = resample_pdf(prev.weights.data, prev.edges, n_fine, rng)
    return render_samples(model, rays, fine_t), coarse


def render_pixel(model, sample_nets, ray, n_coarse=64, n_fine=32, rng=None):
    fine, coarse = render_rays(model, sample_nets, RayBatch.from_rays([ray]), n_coarse, n_fine, rng)
    return fine, (coarse[-1] if coarse else None)


def render_image(model, sample_nets, camera, tau, n_coarse=64, n_fine=32, chunk=2048):
    """Full frame at time ``tau`` with deterministic samples.

    Returns ``(rgb, depth_t)`` arrays of shape (H, W, 3) and (H, W); depth is
    in NDC t units.
    """
    h, w = camera.height, camera.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    origins, directions = ndc_rays(camera, rows.ravel(), cols.ravel())
    rgb = np.empty((h * w, 3))
    depth = np.empty(h * w)
    with dg.no_grad():
        for start in range(0, h * w, chunk):
            sl = slice(start, start + chunk)
            rays = RayBatch(origins[sl], directions[sl], np.full(origins[sl].shape[0], float(tau)))
            fine, _ = render_rays(model, sample_nets, rays, n_coarse, n_fine, None)
            rgb[sl] = fine.color.data
            depth[sl] = fine.depth.data
    return rgb.reshape(h, w, 3), depth.reshape(h, w)
