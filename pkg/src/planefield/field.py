"""Six-plane factorized 4D field, OneBlob coordinate-time encoding and the decoder.

A point ``(x, y, z, tau)`` (all in [-1, 1]) is projected onto three space
planes (XY, YZ, XZ) and three space-time planes (XT, YT, ZT). The six
bilinear lookups are multiplied element-wise per resolution level, the
per-level products are concatenated, and the result is decoded together with
the OneBlob encoding of the point.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import erf

from . import diffgraph as dg
from ._validation import ContractViolation, require

SPACE_PLANES = ("XY", "YZ", "XZ")
SPACETIME_PLANES = ("XT", "YT", "ZT")
PLANE_NAMES = SPACE_PLANES + SPACETIME_PLANES
# coordinate index (x=0, y=1, z=2, tau=3) feeding the plane's rows and cols
PLANE_AXES = {"XY": (0, 1), "YZ": (1, 2), "XZ": (0, 2),
              "XT": (0, 3), "YT": (1, 3), "ZT": (2, 3)}


@dataclass
class FeaturePlane:
    axis_pair: str
    data: dg.Tensor

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def feat_dim(self):
        return self.data.shape[2]

    @property
    def is_space(self):
        return self.axis_pair in SPACE_PLANES


@dataclass
class FieldSet:
    levels: list                      # one {name: FeaturePlane} dict per level
    spatial_resolutions: tuple
    temporal_resolutions: tuple
    feat_dim: int
    diagnostics: dict = field(default_factory=lambda: {"clamped": 0})

    def planes(self):
        for lvl, planes in enumerate(self.levels):
            for name in PLANE_NAMES:
                yield lvl, planes[name]

    def space_planes(self):
        return [p for _, p in self.planes() if p.is_space]

    def spacetime_planes(self):
        return [p for _, p in self.planes() if not p.is_space]

    def space_parameter_count(self):
        return sum(p.data.size for p in self.space_planes())

    def parameter_count(self):
        return sum(p.data.size for _, p in self.planes())

    def named_tensors(self, prefix="field"):
        return [(f"{prefix}.l{lvl}.{p.axis_pair}", p.data) for lvl, p in self.planes()]


def temporal_resolution(n, n_frames=None):
    m = max(n // 2, 1)
    if n_frames is not None:
        m = min(m, max(int(n_frames), 1))
    return m


def init_fieldset(resolutions, feat_dim, n_frames=None, seed=0, freeze_dynamic=False):
    """Space planes ~ U(0.1, 0.5); space-time planes exactly 1 (static start)."""
    resolutions = tuple(int(r) for r in resolutions)
    require(len(resolutions) > 0, "init_fieldset: need at least one resolution")
    require(all(r > 0 for r in resolutions) and feat_dim > 0,
            "init_fieldset: resolutions and feat_dim must be positive")
    require(all(a < b for a, b in zip(resolutions, resolutions[1:])),
            "init_fieldset: resolutions must be strictly increasing")
    rng = np.random.default_rng(seed)
    levels, temporal = [], []
    for n in resolutions:
        m = temporal_resolution(n, n_frames)
        temporal.append(m)
        planes = {}
        for name in SPACE_PLANES:
            planes[name] = FeaturePlane(
                name, dg.Tensor(rng.uniform(0.1, 0.5, size=(n, n, feat_dim)), requires_grad=True))
        for name in SPACETIME_PLANES:
            planes[name] = FeaturePlane(
                name, dg.Tensor(np.ones((n, m, feat_dim)), requires_grad=not freeze_dynamic))
        levels.append(planes)
    return FieldSet(levels, resolutions, tuple(temporal), int(feat_dim))


def _corner_weights(coord, res):
    """Align-corners lookup: lower index and fractional offset along one axis."""
    g = (coord + 1.0) * 0.5 * (res - 1)
    if res == 1:
        zero = np.zeros(coord.shape, dtype=np.intp)
        return zero, zero, np.zeros(coord.shape)
    i0 = np.clip(np.floor(g).astype(np.intp), 0, res - 2)
    return i0, i0 + 1, g - i0


def bilerp_batch(plane, u, v, diagnostics=None):
    """Bilinear lookup of ``plane`` at P query points; returns a (P, D) Tensor.

    Queries outside [-1, 1] are clamped to the border and counted in
    ``diagnostics['clamped']``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    outside = (np.abs(u) > 1.0) | (np.abs(v) > 1.0)
    if outside.any():
        if diagnostics is not None:
            diagnostics["clamped"] = diagnostics.get("clamped", 0) + int(outside.sum())
        u = np.clip(u, -1.0, 1.0)
        v = np.clip(v, -1.0, 1.0)
    rows, cols, d = plane.data.shape
    r0, r1, fr = _corner_weights(u, rows)
    c0, c1, fc = _corner_weights(v, cols)
    p = u.shape[0]
    idx = np.stack([r0 * cols + c0, r0 * cols + c1, r1 * cols + c0, r1 * cols + c1], axis=1)
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    # each row of the interpolation matrix holds the four corner weights
    interp = sparse.csr_matrix((w.ravel(), idx.ravel(), np.arange(0, 4 * p + 1, 4)),
                               shape=(p, rows * cols))
    return dg.matmul(interp, dg.reshape(plane.data, (rows * cols, d)))


def bilerp(plane, u, v, diagnostics=None):
    """Single-point lookup; returns the length-D feature vector as a Tensor."""
    out = bilerp_batch(plane, np.array([u], dtype=np.float64), np.array([v], dtype=np.float64),
                       diagnostics)
    return dg.reshape(out, (plane.feat_dim,))


def fuse(fieldset, points):
    """Per-level product of the six plane lookups, concatenated across levels.

    ``points`` is (P, 4) with columns x, y, z, tau. Returns (P, levels * D).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != 4:
        raise ContractViolation(f"fuse: points must be (P, 4), got {points.shape}")
    per_level = []
    for planes in fieldset.levels:
        prod = None
        for name in PLANE_NAMES:
            a, b = PLANE_AXES[name]
            f = bilerp_batch(planes[name], points[:, a], points[:, b], fieldset.diagnostics)
            prod = f if prod is None else dg.mul(prod, f)
        per_level.append(prod)
    return per_level[0] if len(per_level) == 1 else dg.concat(per_level)


def oneblob_encode(points, bins):
    """OneBlob encoding of (P, 4) coordinates in [-1, 1]; returns (P, 4 * bins).

    Bin k of a coordinate holds the mass of a Gaussian (std 1/bins) centred on
    the coordinate (mapped to [0, 1]) that falls inside [k/bins, (k+1)/bins].
    """
    if bins < 2:
        raise ContractViolation("oneblob_encode: need at least 2 bins")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x = (np.clip(points, -1.0, 1.0) + 1.0) * 0.5
    edges = np.linspace(0.0, 1.0, bins + 1)
    cdf = erf((edges[None, None, :] - x[..., None]) * (bins / np.sqrt(2.0)))
    enc = 0.5 * (cdf[..., 1:] - cdf[..., :-1])
    return enc.reshape(points.shape[0], -1)


@dataclass
class DecoderNet:
    """Tiny relu MLP: input -> hidden layers -> 4 raw outputs (density, r, g, b)."""

    weights: list
    biases: list

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    @property
    def hidden_width(self):
        return self.weights[0].shape[1] if len(self.weights) > 1 else 0

    @property
    def output_dim(self):
        return self.weights[-1].shape[1]

    def named_tensors(self, prefix="decoder"):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"{prefix}.w{i}", w), (f"{prefix}.b{i}", b)]
        return out


def init_decoder(input_dim, hidden_width=64, hidden_layers=2, seed=0, silent_inputs=()):
    """Glorot-uniform weights, zero biases.

    First-layer rows listed in ``silent_inputs`` start at zero, so those
    inputs have no influence until training moves them.
    """
    require(input_dim > 0 and hidden_width > 0 and hidden_layers >= 0,
            "init_decoder: dimensions must be positive")
    rng = np.random.default_rng(seed)
    dims = [input_dim] + [hidden_width] * hidden_layers + [4]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(dg.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
        biases.append(dg.Tensor(np.zeros(fan_out), requires_grad=True))
    weights[0].data[list(silent_inputs)] = 0.0
    return DecoderNet(weights, biases)


_SELECT_SIGMA = np.array([[1.0], [0.0], [0.0], [0.0]])
_SELECT_COLOR = np.vstack([np.zeros((1, 3)), np.eye(3)])


def decode(net, fused, encoding):
    """Returns ``(sigma, color)``: softplus density (P,) and sigmoid color (P, 3)."""
    enc = encoding if isinstance(encoding, dg.Tensor) else dg.Tensor(np.atleast_2d(encoding))
    if fused.ndim == 1:
        fused = dg.reshape(fused, (1, fused.shape[0]))
    if enc.ndim == 1:
        enc = dg.reshape(enc, (1, enc.shape[0]))
    if fused.shape[1] + enc.shape[1] != net.input_dim:
        raise ContractViolation(
            f"decode: input length {fused.shape[1]} + {enc.shape[1]} != {net.input_dim}")
    h = dg.concat([fused, enc])
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = dg.affine(h, w, b)
        if i < last:
            h = dg.relu(h)
    p = h.shape[0]
    sigma = dg.softplus(dg.reshape(dg.matmul(h, dg.Tensor(_SELECT_SIGMA)), (p,)))
    color = dg.sigmoid(dg.matmul(h, dg.Tensor(_SELECT_COLOR)))
    return sigma, color


class PlaneField:
    """A FieldSet plus its decoder: maps (x, y, z, tau) points to density and color."""

    def __init__(self, resolutions, feat_dim=32, bins=16, hidden_width=64, hidden_layers=2,
                 n_frames=None, seed=0, freeze_dynamic=False):
        self.bins = int(bins)
        # a frozen field is static: planes stay at 1 and the time encoding is withheld
        self.static = bool(freeze_dynamic)
        self.fieldset = init_fieldset(resolutions, feat_dim, n_frames, seed, freeze_dynamic)
        width = len(self.fieldset.levels) * feat_dim + 4 * self.bins
        # the time block of the encoding starts silent so the untrained scene is static
        self.decoder = init_decoder(width, hidden_width, hidden_layers, seed + 1,
                                    silent_inputs=range(width - self.bins, width))

    def query(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        enc = oneblob_encode(points, self.bins)
        if self.static:
            enc[:, 3 * self.bins:] = 0.0
        return decode(self.decoder, fuse(self.fieldset, points), enc)

    def named_tensors(self, prefix):
        return (self.fieldset.named_tensors(prefix + ".field")
                + self.decoder.named_tensors(prefix + ".decoder"))
