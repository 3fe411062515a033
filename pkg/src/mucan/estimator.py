"""scikit-learn style wrapper around the network.

Clips play the role of samples: ``X`` is (n_clips, 2N+1, 3, H, W) and ``y``
the matching (n_clips, 3, 4H, 4W) HR centre frames.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import network as nw
from ._validation import check_clips, check_targets
from .loss_metrics import psnr


class MuCANSuperResolver(RegressorMixin, BaseEstimator):
    """4x video super-resolver.

    Parameters
    ----------
    config : MucanConfig or None
        Network and training settings; defaults to ``MucanConfig()``.
    iterations : int or None
        Overrides ``config.iterations`` for :meth:`fit`.
    warm_start : bool
        Continue from the current weights instead of re-initialising.
    threads : int
        Worker threads for the correlation search.
    """

    def __init__(self, config=None, iterations=None, warm_start=False, threads=1):
        self.config = config
        self.iterations = iterations
        self.warm_start = warm_start
        self.threads = threads

    def _config(self):
        cfg = nw.MucanConfig() if self.config is None else self.config
        cfg.validate()
        return cfg

    def fit(self, X, y):
        cfg = self._config()
        X = check_clips(X, cfg.n_frames)
        y = check_targets(y, X, cfg.scale)
        start = self.weights_ if self.warm_start and hasattr(self, "weights_") else None
        clips = [(list(frames), target) for frames, target in zip(X, y)]
        self.weights_, self.loss_curve_ = nw.train(clips, cfg, self.iterations, weights=start)
        self.n_iter_ = len(self.loss_curve_)
        return self

    def load_weights(self, weights):
        """Adopt pre-trained weights (a path or a WeightStore) without training."""
        cfg = self._config()
        store = nw.load_model(weights, cfg) if isinstance(weights, (str, bytes)) or hasattr(weights, "__fspath__") else weights
        nw.check_weights(store, cfg)
        self.weights_ = store
        self.loss_curve_ = []
        self.n_iter_ = 0
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        cfg = self._config()
        X = check_clips(X, cfg.n_frames)
        return np.stack([nw.predict(list(frames), self.weights_, cfg, self.threads) for frames in X])

    def score(self, X, y, sample_weight=None) -> float:
        """Mean PSNR in dB (higher is better) over clips."""
        pred = self.predict(X)
        y = check_targets(y, check_clips(X, self._config().n_frames), self._config().scale)
        return float(np.average([psnr(p, t) for p, t in zip(pred, y)], weights=sample_weight))
