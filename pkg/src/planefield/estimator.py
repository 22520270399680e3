"""scikit-learn style wrapper around the trainer.

``fit`` takes a :class:`~planefield.data.Dataset`; ``predict`` renders frames
at given times (or at every time of a dataset); ``score`` is the mean masked
PSNR on a dataset.
"""

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import ContractViolation, check_is_fitted
from .data import Dataset
from .metrics import psnr
from .render import render_image
from .trainer import TrainConfig, Trainer, load_checkpoint


class PlaneFieldEstimator(BaseEstimator):
    """Dynamic scene reconstructor.

    Parameters left as ``None`` take their value from ``config`` (or the
    built-in defaults when ``config`` is ``None``).
    """

    def __init__(self, config=None, iters=None, batch_rays=None, resolutions=None,
                 samplenet_resolutions=None, feat_dim=None, n_coarse=None, n_fine=None,
                 freeze_dynamic=None, seed=None):
        self.config = config
        self.iters = iters
        self.batch_rays = batch_rays
        self.resolutions = resolutions
        self.samplenet_resolutions = samplenet_resolutions
        self.feat_dim = feat_dim
        self.n_coarse = n_coarse
        self.n_fine = n_fine
        self.freeze_dynamic = freeze_dynamic
        self.seed = seed

    def resolved_config(self):
        base = self.config if self.config is not None else TrainConfig()
        if not isinstance(base, TrainConfig):
            raise ContractViolation("config must be a TrainConfig or None")
        overrides = {k: v for k, v in self.get_params(deep=False).items()
                     if k != "config" and v is not None}
        if "iters" in overrides and (self.config is None
                                     or base.lr_warmup_iters >= overrides["iters"]):
            overrides["lr_warmup_iters"] = None      # re-derive for the new length
        return replace(base, **overrides)

    def fit(self, X, y=None, log_path=None, checkpoint_dir=None):
        if not isinstance(X, Dataset):
            raise ContractViolation("fit expects a Dataset")
        self.trainer_ = Trainer(self.resolved_config(), X)
        self.history_ = self.trainer_.fit(log_path=log_path, checkpoint_dir=checkpoint_dir)
        self.state_ = self.trainer_.state
        return self

    @classmethod
    def from_checkpoint(cls, path):
        state = load_checkpoint(path)
        est = cls(config=state.config)
        est.state_ = state
        return est

    def predict(self, X, return_depth=False):
        """Render frames; ``X`` is a Dataset or an array of times in [-1, 1]."""
        check_is_fitted(self, "state_")
        times = X.times if isinstance(X, Dataset) else np.atleast_1d(np.asarray(X, dtype=np.float64))
        if times.ndim != 1 or np.any(np.abs(times) > 1.0):
            raise ContractViolation("predict: times must be a 1-D array within [-1, 1]")
        cfg = self.state_.config
        model = self.state_.model
        rgbs, depths = [], []
        for tau in times:
            rgb, depth = render_image(model.field, model.sample_nets, self.state_.camera, tau,
                                      cfg.n_coarse, cfg.n_fine)
            rgbs.append(rgb)
            depths.append(depth)
        if return_depth:
            return np.stack(rgbs), np.stack(depths)
        return np.stack(rgbs)

    def score(self, X, y=None):
        """Mean PSNR over the tissue pixels of every frame of ``X``."""
        if not isinstance(X, Dataset):
            raise ContractViolation("score expects a Dataset")
        preds = self.predict(X)
        return float(np.mean([psnr(p, f.image, f.mask) for p, f in zip(preds, X.frames)]))
