"""scikit-learn style wrapper around one or more cost-matching learning rounds.

``X`` is a list of Trajectory objects; targets are derived from their logged
stage costs, so ``y`` is accepted only for API compatibility and ignored.
"""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError
from .learner import AnchorBatch, Context, LearnConfig, batch_values, train_round
from .valuation import Dataset, ParamVector, Trajectory


def _check_trajectories(X):
    X = [X] if isinstance(X, Trajectory) else list(X)
    if not X or not all(isinstance(t, Trajectory) for t in X):
        raise ConfigError("X must be a non-empty sequence of Trajectory objects")
    return X


class CostMatchingEstimator(BaseEstimator, RegressorMixin):
    """Learns MPC parameters by matching predicted to measured cost-to-go.

    Parameters mirror LearnConfig; ``theta0`` defaults to unit gains and the
    package's nominal weights. ``fit`` restarts from ``theta0``; ``partial_fit``
    continues from the current ``theta_`` (one on-policy round per call).
    """

    def __init__(self, theta0=None, horizon=20, gamma=0.985, alpha="auto", batch_size=32,
                 n_updates=300, trainable=("theta_hl", "theta_ha"), theta_lower_bounds=None,
                 validation_fraction=0.0, random_state=0, context=None):
        self.theta0 = theta0
        self.horizon = horizon
        self.gamma = gamma
        self.alpha = alpha
        self.batch_size = batch_size
        self.n_updates = n_updates
        self.trainable = trainable
        self.theta_lower_bounds = theta_lower_bounds
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.context = context

    def _learn_config(self, round_idx):
        return LearnConfig(gamma=self.gamma, alpha=self.alpha, batch_size=self.batch_size,
                           updates_per_round=self.n_updates, rounds=1,
                           theta_lower_bounds=self.theta_lower_bounds,
                           rng_seed=int(self.random_state) + round_idx, horizon=self.horizon,
                           trainable=self.trainable, validation_fraction=self.validation_fraction)

    def _initial_theta(self):
        if self.theta0 is not None:
            return self.theta0
        from .config import nominal_task_weights
        return ParamVector(np.ones(3), np.ones(3), nominal_task_weights())

    def fit(self, X, y=None):
        self.theta_ = self._initial_theta()
        self.diagnostics_ = []
        self.n_rounds_ = 0
        return self.partial_fit(X, y)

    def partial_fit(self, X, y=None):
        X = _check_trajectories(X)
        if not hasattr(self, "theta_"):
            self.theta_ = self._initial_theta()
            self.diagnostics_ = []
            self.n_rounds_ = 0
        self.theta_, diag = train_round(self.theta_, X, self._learn_config(self.n_rounds_),
                                        self.context or Context())
        self.diagnostics_.append(diag)
        self.n_rounds_ += 1
        return self

    def _values(self, X):
        check_is_fitted(self, "theta_")
        ds = Dataset(_check_trajectories(X), self.horizon, self.gamma)
        values, targets, _ = batch_values(self.theta_, AnchorBatch(ds, ds.anchors),
                                          self.context or Context())
        return values, targets

    def predict(self, X):
        """Q^MPC at every valid anchor of ``X`` (trajectory order, then anchor order)."""
        return self._values(X)[0]

    def targets(self, X):
        """Measured discounted cost-to-go at the same anchors as ``predict``."""
        check_is_fitted(self, "theta_")
        ds = Dataset(_check_trajectories(X), self.horizon, self.gamma)
        return ds.targets(ds.anchors)

    def score(self, X, y=None, sample_weight=None):
        """Negative value-matching MSE (higher is better)."""
        values, targets = self._values(X)
        r = values - targets
        return -float(np.average(r * r, weights=sample_weight))
