"""scikit-learn estimator wrappers around the filter and the network.

These are thin facades for pipeline composition (``get_params``/``clone``/
``fit_transform``); all behaviour lives in :mod:`octafreq.masf`,
:mod:`octafreq.model` and :mod:`octafreq.training`.  Both transformers
accept either a plain ``(D, H, W)`` array or a :class:`~octafreq.volume
.Volume` and return the same kind, on the [0, 255] intensity scale.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, ShapeError
from .masf import MasfConfig, masf_volume
from .model import ModelConfig, build_model, enhance_volume, load_model
from .training import PairDataset, TrainConfig, train
from .volume import Volume

__all__ = ["MasfFilter", "VolumeEnhancer"]


def _as_volume(X) -> tuple[Volume, bool]:
    if isinstance(X, Volume):
        return X, True
    arr = np.asarray(X)
    if arr.ndim != 3:
        raise ShapeError(f"expected a (D, H, W) volume, got shape {arr.shape}")
    return Volume(arr), False


class MasfFilter(TransformerMixin, BaseEstimator):
    """Stateless depth-wise tail-artifact filter.

    ``fit`` only validates the parameters; ``transform`` subtracts the
    decaying trail that bright voxels cast onto the ``window`` samples
    beneath them, scaled by ``gamma``.  Set ``flip_depth`` for volumes
    stored deepest-plane-first.
    """

    def __init__(self, gamma: float = 0.8, window: int = 11,
                 flip_depth: bool = False):
        self.gamma = gamma
        self.window = window
        self.flip_depth = flip_depth

    def _config(self) -> MasfConfig:
        return MasfConfig(gamma=self.gamma, window=self.window,
                          flip_depth=self.flip_depth)

    def fit(self, X=None, y=None) -> "MasfFilter":
        self._config()
        return self

    def transform(self, X):
        vol, wrap = _as_volume(X)
        out = masf_volume(vol.data, self._config())
        return Volume(out, vol.voxel_size_mm) if wrap else out


class VolumeEnhancer(TransformerMixin, BaseEstimator):
    """Plane-wise enhancement network behind the estimator interface.

    ``fit(X, y)`` trains a fresh model on ``(X[i], y[i])`` plane pairs —
    noisy single-repeat planes against their multi-repeat merged targets,
    both ``(N, H, W)`` on [0, 255].  The last ``val_fraction`` of the pairs
    (at least one) is held out to track validation loss, so at least two
    pairs are required.  ``transform`` then enhances whole volumes plane by
    plane.  Use :meth:`from_checkpoint` to apply an already trained model.
    """

    def __init__(self, preset: str = "tiny", total_iters: int = 500,
                 lr0: float = 1e-4, drop_path: float = 0.1,
                 val_fraction: float = 0.1, seed: int = 0, workers: int = 1,
                 model_overrides: dict | None = None):
        self.preset = preset
        self.total_iters = total_iters
        self.lr0 = lr0
        self.drop_path = drop_path
        self.val_fraction = val_fraction
        self.seed = seed
        self.workers = workers
        self.model_overrides = model_overrides

    @classmethod
    def from_checkpoint(cls, path, workers: int = 1) -> "VolumeEnhancer":
        """A ready-to-``transform`` enhancer wrapping a saved checkpoint."""
        est = cls(workers=workers)
        est.model_ = load_model(path)
        est.curve_ = []
        return est

    def fit(self, X, y) -> "VolumeEnhancer":
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y, dtype=np.float32)
        if X.ndim != 3 or X.shape != y.shape:
            raise ShapeError("fit expects matching (N, H, W) plane stacks, "
                             f"got {X.shape} and {y.shape}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), "
                              f"got {self.val_fraction}")
        if len(X) < 2:
            raise ConfigError("need at least two pairs (one is held out "
                              "for validation)")
        n_val = max(1, math.ceil(len(X) * self.val_fraction))
        pairs = list(zip(X, y))
        dataset = PairDataset(train=pairs[:-n_val], val=pairs[-n_val:])

        cfg = ModelConfig.preset(self.preset, **(self.model_overrides or {}))
        train_cfg = TrainConfig(lr0=self.lr0, total_iters=self.total_iters,
                                drop_path=self.drop_path, seed=self.seed,
                                eval_every=max(1, self.total_iters))
        result = train(build_model(cfg, seed=self.seed), dataset, train_cfg,
                       verbose=False)
        self.model_ = result.model
        self.curve_ = result.curve
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        vol, wrap = _as_volume(X)
        out = enhance_volume(self.model_, vol, workers=self.workers)
        return out if wrap else out.data
