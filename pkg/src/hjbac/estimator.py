"""scikit-learn style wrapper around :class:`~hjbac.trainer.Trainer`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_array, check_is_fitted

from .trainer import TrainConfig, Trainer, validate


class HJBSolver(RegressorMixin, BaseEstimator):
    """Learn the value function and optimal feedback control of a benchmark problem.

    ``fit`` takes no training data: paths are simulated from the problem
    itself. An ``X`` passed to ``fit`` replaces the random validation set
    used for the error curve. After fitting, ``predict`` returns the learned
    value ``V(x)`` and ``predict_control`` the learned control ``u(x)``.

    Parameters mirror :class:`~hjbac.trainer.TrainConfig`; ``iters`` is the
    tuple of learning-rate stage lengths.

    Examples
    --------
    >>> est = HJBSolver(problem="lqr", dim=2, batch=16, width=8, iters=(2, 0, 0))
    >>> est.fit().predict(np.zeros((1, 2))).shape
    (1,)
    """

    def __init__(self, problem="lqr", dim=5, constants=None, scheme="adaptive", td="vr-lstd", T=0.2,
                 N=None, batch=None, eta=1.0, width=200, depth=None, lr=(1e-3, 1e-4, 1e-5), iters=None,
                 seed=0, eval_every=100, grad_through_h=False, control_head=None, penalty_weight=0.0):
        self.problem = problem
        self.dim = dim
        self.constants = constants
        self.scheme = scheme
        self.td = td
        self.T = T
        self.N = N
        self.batch = batch
        self.eta = eta
        self.width = width
        self.depth = depth
        self.lr = lr
        self.iters = iters
        self.seed = seed
        self.eval_every = eval_every
        self.grad_through_h = grad_through_h
        self.control_head = control_head
        self.penalty_weight = penalty_weight

    def _config(self) -> TrainConfig:
        params = self.get_params()
        params["constants"] = dict(params["constants"] or {})
        return TrainConfig(**params)

    def fit(self, X=None, y=None):
        """Train on simulated paths. ``y`` is ignored."""
        trainer = Trainer(self._config())
        if X is not None:
            X = check_array(X, dtype=np.float64)
            self._check_dim(X, trainer.problem.dim)
            trainer.validation_points = X
        trainer.run()
        self.trainer_ = trainer
        self.networks_ = trainer.nets
        self.problem_ = trainer.problem
        self.history_ = list(trainer.history)
        self.n_features_in_ = trainer.problem.dim
        self.n_iter_ = trainer.iteration
        return self

    @staticmethod
    def _check_dim(X, dim):
        if X.shape[1] != dim:
            raise ValueError(f"X has {X.shape[1]} features, but the problem is {dim}-dimensional")

    def _points(self, X):
        check_is_fitted(self, "networks_")
        X = check_array(X, dtype=np.float64)
        self._check_dim(X, self.n_features_in_)
        return X

    def predict(self, X):
        """Learned value at each row of ``X``, shape (n_samples,)."""
        X = self._points(X)
        return np.asarray(self.networks_.value(X))

    def predict_control(self, X):
        """Learned feedback control at each row of ``X``, shape (n_samples, d_u)."""
        X = self._points(X)
        return np.asarray(self.networks_.control(X))

    def score(self, X, y=None, sample_weight=None):
        """R^2 of the learned value against ``y`` (default: the exact value)."""
        X = self._points(X)
        if y is None:
            y = self.problem_.exact_value(X)
        return r2_score(y, self.predict(X), sample_weight=sample_weight)

    def relative_errors(self, X):
        """``(err_V, err_u)`` relative L2 errors against the exact solution on ``X``."""
        X = self._points(X)
        return validate(self.networks_, self.problem_, X)
