"""Training objectives: photometric, Huber depth, plane regularizers, proposal loss."""

from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse

from . import diffgraph as dg
from ._validation import ContractViolation, require

HISTOGRAM_EPS = 1e-7


@dataclass
class LossWeights:
    w_color: float = 1.0
    w_depth: float = 1.0
    w_tv_space: float = 2e-3
    w_tv_spacetime: float = 2e-3
    w_smooth_time: float = 1e-3
    w_time_invariant: float = 1e-4
    w_histogram: float = 1.0

    def __post_init__(self):
        require(self.w_color > 0, "w_color must be positive")
        require(all(v >= 0 for v in asdict(self).values()), "loss weights must be non-negative")


@dataclass
class DepthLossConfig:
    delta: float = 0.2
    enabled: bool = True

    def __post_init__(self):
        require(self.delta > 0, "Huber threshold must be positive")


def _t(x):
    return x if isinstance(x, dg.Tensor) else dg.Tensor(np.asarray(x, dtype=np.float64))


def color_loss(pred, target):
    """Mean squared error over every channel of every ray."""
    pred, target = _t(pred), _t(target)
    return dg.mean(dg.square(dg.sub(pred, target)))


def huber(pred, target, delta):
    """Elementwise Huber on |pred - target|: 0.5 d^2 below delta, delta (d - delta/2) above."""
    diff = dg.abs(dg.sub(_t(pred), _t(target)))
    excess = dg.clamp_min(dg.sub(diff, dg.Tensor(np.full(diff.shape, delta))), 0.0)
    inner = dg.sub(diff, excess)                       # min(diff, delta)
    return dg.add(dg.scale(dg.square(inner), 0.5), dg.scale(excess, delta))


def depth_huber(pred, target, delta=0.2, valid=None):
    """Huber depth loss averaged over valid rays; returns None when none are valid."""
    pred, target = _t(pred), np.asarray(_t(target).data)
    if valid is None:
        valid = np.ones(target.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        return None
    per_ray = huber(pred, np.where(valid, target, 0.0), delta)
    return dg.scale(dg.sum(dg.mul(per_ray, dg.Tensor(valid.astype(np.float64)))), 1.0 / n)


def _shift_diff(table, idx_a, idx_b):
    return dg.sub(dg.gather_rows(table, idx_a), dg.gather_rows(table, idx_b))


def _grid_index(rows, cols):
    return np.arange(rows * cols).reshape(rows, cols)


def _sq_mean(t):
    return dg.mean(dg.square(t))


def tv2d(plane):
    """Mean squared difference to the down neighbour plus the same to the right."""
    if not plane.is_space:
        raise ContractViolation(f"tv2d applies to space planes, got {plane.axis_pair}")
    rows, cols, d = plane.data.shape
    table = dg.reshape(plane.data, (rows * cols, d))
    grid = _grid_index(rows, cols)
    terms = []
    if rows > 1:
        terms.append(_sq_mean(_shift_diff(table, grid[1:].ravel(), grid[:-1].ravel())))
    if cols > 1:
        terms.append(_sq_mean(_shift_diff(table, grid[:, 1:].ravel(), grid[:, :-1].ravel())))
    if not terms:
        return dg.scale(dg.sum(table), 0.0)
    return terms[0] if len(terms) == 1 else dg.add(terms[0], terms[1])


def tv_spacetime(plane):
    """``(space_tv, time_smooth)`` for a space-time plane (rows = space, cols = time).

    ``space_tv`` is the mean squared first difference along space;
    ``time_smooth`` the mean squared second difference along time.
    """
    if plane.is_space:
        raise ContractViolation(f"tv_spacetime applies to space-time planes, got {plane.axis_pair}")
    rows, cols, d = plane.data.shape
    table = dg.reshape(plane.data, (rows * cols, d))
    grid = _grid_index(rows, cols)
    zero = dg.scale(dg.sum(table), 0.0)
    space = _sq_mean(_shift_diff(table, grid[1:].ravel(), grid[:-1].ravel())) if rows > 1 else zero
    if cols > 2:
        nxt = dg.gather_rows(table, grid[:, 2:].ravel())
        mid = dg.gather_rows(table, grid[:, 1:-1].ravel())
        prv = dg.gather_rows(table, grid[:, :-2].ravel())
        smooth = _sq_mean(dg.sub(dg.add(nxt, prv), dg.scale(mid, 2.0)))
    else:
        smooth = zero
    return space, smooth


def time_invariant_loss(fieldset):
    """Mean absolute deviation of all space-time entries from 1."""
    terms, count = [], 0
    for plane in fieldset.spacetime_planes():
        flat = dg.reshape(plane.data, (plane.data.size,))
        terms.append(dg.sum(dg.abs(dg.sub(flat, dg.Tensor(np.ones(flat.shape))))))
        count += flat.size
    total = terms[0]
    for t in terms[1:]:
        total = dg.add(total, t)
    return dg.scale(total, 1.0 / count)


def _interval_bounds(c_edges, f_edges):
    """Index ranges [lo, hi) of coarse intervals overlapping each fine interval."""
    r = c_edges.shape[0]
    span = max(np.ptp(c_edges), np.ptp(f_edges)) + 1.0
    offs = (np.arange(r) * 4.0 * span)[:, None]
    starts = (c_edges[:, :-1] + offs).ravel()
    ends = (c_edges[:, 1:] + offs).ravel()
    sc = c_edges.shape[1] - 1
    base = (np.arange(r) * sc)[:, None]
    f_lo = f_edges[:, :-1] + offs
    f_hi = f_edges[:, 1:] + offs
    # first coarse interval whose end lies beyond the fine start
    lo = np.searchsorted(ends, f_lo.ravel(), side="right").reshape(f_lo.shape) - base
    # number of coarse intervals starting before the fine end
    hi = np.searchsorted(starts, f_hi.ravel(), side="left").reshape(f_hi.shape) - base
    lo = np.clip(lo, 0, sc)
    hi = np.clip(hi, 0, sc)
    return lo, np.maximum(hi, lo)


def histogram_bound(coarse_weights, coarse_edges, fine_edges):
    """Per fine interval, the summed coarse weight of all overlapping coarse intervals."""
    w = _t(coarse_weights)
    c_edges = np.atleast_2d(np.asarray(coarse_edges, dtype=np.float64))
    f_edges = np.atleast_2d(np.asarray(fine_edges, dtype=np.float64))
    if np.any(np.diff(c_edges, axis=1) < 0) or np.any(np.diff(f_edges, axis=1) < 0):
        raise ContractViolation("histogram loss: edges must be sorted")
    if w.ndim == 1:
        w = dg.reshape(w, (1, w.shape[0]))
    r, sc = w.shape
    lo, hi = _interval_bounds(c_edges, f_edges)
    # one row per fine interval selecting its overlapping coarse intervals;
    # summing selected entries directly keeps a single overlap exact
    counts = (hi - lo).ravel()
    first = (lo + (np.arange(r) * sc)[:, None]).ravel()
    indptr = np.concatenate([[0], np.cumsum(counts)])
    cols = np.repeat(first - indptr[:-1], counts) + np.arange(indptr[-1])
    select = sparse.csr_matrix((np.ones(indptr[-1]), cols, indptr), shape=(lo.size, r * sc))
    bound = dg.matmul(select, dg.reshape(w, (r * sc, 1)))
    return dg.reshape(bound, lo.shape)


def histogram_loss(coarse, fine, eps=HISTOGRAM_EPS):
    """Proposal supervision; ``coarse`` and ``fine`` are ``(weights, edges)`` pairs.

    Sum over fine intervals of ``max(0, w_fine - bound)^2 / (bound + eps)``,
    averaged over rays. Fine weights are constants.
    """
    cw, ce = coarse
    fw, fe = fine
    fw = np.atleast_2d(np.asarray(fw.data if isinstance(fw, dg.Tensor) else fw, dtype=np.float64))
    if np.any(fw < 0) or np.any(_t(cw).data < 0):
        raise ContractViolation("histogram loss: weights must be non-negative")
    bound = histogram_bound(cw, ce, fe)
    gap = dg.clamp_min(dg.sub(dg.Tensor(fw), bound), 0.0)
    ratio = dg.div(dg.square(gap), dg.add(bound, dg.Tensor(np.full(bound.shape, eps))))
    return dg.scale(dg.sum(ratio), 1.0 / fw.shape[0])


@dataclass
class LossTerms:
    total: dg.Tensor
    parts: dict                # name -> float


def _acc(total, term, weight):
    if term is None or weight == 0:
        return total
    scaled = dg.scale(term, weight)
    return scaled if total is None else dg.add(total, scaled)


def regularizers(fieldset):
    """Summed ``(tv_space, tv_st, smooth, tinv)`` Tensors over all planes and levels."""
    tv_space = tv_st = smooth = None
    for plane in fieldset.space_planes():
        tv = tv2d(plane)
        tv_space = tv if tv_space is None else dg.add(tv_space, tv)
    for plane in fieldset.spacetime_planes():
        s, m = tv_spacetime(plane)
        tv_st = s if tv_st is None else dg.add(tv_st, s)
        smooth = m if smooth is None else dg.add(smooth, m)
    return tv_space, tv_st, smooth, time_invariant_loss(fieldset)


def total_loss(fine, coarse, target_rgb, target_depth, depth_valid, fieldsets, weights,
               depth_cfg, samplenet_photometric=False):
    """Weighted sum of every term for one batch.

    ``fine`` / ``coarse`` are RenderOutputs (``coarse`` a list, one per
    sample-net stage); ``target_depth`` is in NDC t units; ``fieldsets`` are
    every FieldSet receiving plane regularizers. The depth term is only built
    when ``depth_cfg.enabled``; when disabled it is absent from the graph.
    """
    parts = {}
    total = None

    c = color_loss(fine.color, target_rgb)
    if samplenet_photometric:
        for out in coarse:
            c = dg.add(c, color_loss(out.color, target_rgb))
    parts["color"] = float(c.data)
    total = _acc(total, c, weights.w_color)

    depth = None
    if depth_cfg.enabled and target_depth is not None:
        for out in [fine] + list(coarse):
            d = depth_huber(out.depth, target_depth, depth_cfg.delta, depth_valid)
            if d is not None:
                depth = d if depth is None else dg.add(depth, d)
    parts["depth"] = float(depth.data) if depth is not None else 0.0
    total = _acc(total, depth, weights.w_depth)

    sums = {"tv_space": None, "tv_st": None, "smooth": None, "tinv": None}
    for fs in fieldsets:
        for key, term in zip(sums, regularizers(fs)):
            sums[key] = term if sums[key] is None else dg.add(sums[key], term)
    for key, w in zip(sums, (weights.w_tv_space, weights.w_tv_spacetime,
                             weights.w_smooth_time, weights.w_time_invariant)):
        term = sums[key]
        parts[key] = float(term.data) if term is not None else 0.0
        total = _acc(total, term, w)

    hist = None
    fine_hist = (fine.weights.data, fine.edges)
    for out in coarse:
        h = histogram_loss((out.weights, out.edges), fine_hist)
        hist = h if hist is None else dg.add(hist, h)
    parts["hist"] = float(hist.data) if hist is not None else 0.0
    total = _acc(total, hist, weights.w_histogram)

    parts["total"] = float(total.data)
    return LossTerms(total, parts)
