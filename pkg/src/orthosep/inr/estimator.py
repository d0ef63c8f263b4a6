from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..projection import ProjectorSpec, ResidualDecomposition
from .siren import DEFAULT_BANDWIDTH, DEFAULT_FOURIER_FEATURES, DEFAULT_HIDDEN, DEFAULT_HIDDEN_LAYERS, DEFAULT_OMEGA0
from .training import TrainConfig, predict_and_decompose, train


class OrthogonalSirenRegressor(RegressorMixin, BaseEstimator):
    """SIREN regressor trained with the projection-regularised loss.

    ``fit(X, y)`` learns the envelope ``y_hat = f(phi(X))`` while penalising
    the part of the residual that lies in the column space of ``X``;
    ``decompose(X, y)`` returns the residual split ``e = r_par + r_perp``
    using a projector built on the whole of ``X``.

    Defaults match the reference training setup (lam=1, 75 epochs, batch 4096,
    lr=1e-5, plateau factor 0.5 / patience 5, omega0=30, 3 x 512 hidden).
    """

    def __init__(
        self,
        lam=1.0,
        epochs=75,
        batch_size=4096,
        lr=1e-5,
        factor=0.5,
        patience=5,
        rel_threshold=1e-4,
        min_lr=1e-8,
        projector="ridge",
        epsilon=1e-3,
        rcond=1e-10,
        projection_scope="batch",
        n_fourier=DEFAULT_FOURIER_FEATURES,
        sigma_b=DEFAULT_BANDWIDTH,
        hidden=DEFAULT_HIDDEN,
        n_hidden=DEFAULT_HIDDEN_LAYERS,
        omega0=DEFAULT_OMEGA0,
        random_state=0,
    ):
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.rel_threshold = rel_threshold
        self.min_lr = min_lr
        self.projector = projector
        self.epsilon = epsilon
        self.rcond = rcond
        self.projection_scope = projection_scope
        self.n_fourier = n_fourier
        self.sigma_b = sigma_b
        self.hidden = hidden
        self.n_hidden = n_hidden
        self.omega0 = omega0
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            lam=self.lam, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            factor=self.factor, patience=self.patience, rel_threshold=self.rel_threshold,
            min_lr=self.min_lr, seed=int(self.random_state),
            projector=ProjectorSpec(self.projector, self.epsilon, self.rcond),
            projection_scope=self.projection_scope, n_fourier=self.n_fourier, sigma_b=self.sigma_b,
            hidden=self.hidden, n_hidden=self.n_hidden, omega0=self.omega0,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.config_ = self._config()
        self.state_ = train(X, y, self.config_)
        self.model_ = self.state_.model
        self.history_ = self.state_.history
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.model_.predict(X)

    def decompose(self, X, y, projector: ProjectorSpec | None = None, index_map=None) -> ResidualDecomposition:
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        return predict_and_decompose(self.model_, X, y, projector or self.config_.projector, index_map)
