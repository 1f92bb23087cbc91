"""A scikit-learn style wrapper around the policy network.

Rows of ``X`` are flattened observation windows (``n_obs`` point clouds of
``k_points`` x 3, then ``n_obs`` proprio vectors); rows of ``y`` are
flattened action chunks (``horizon`` x 2). ``predict`` samples one chunk
per row with DDIM. Use :func:`demo_arrays` to build ``X, y`` from demos.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import envs
from . import training as tr
from .model import ModelConfig, PolicyModel, VRConfig
from .nets import EncoderConfig, UNetConfig
from .numerics import stream
from .policy import ModelPolicy
from .schedules import SamplerConfig, make_schedule


def demo_arrays(ds: tr.DemoDataset, horizon: int = 16, n_obs: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Raw-unit ``(X, y)`` training rows from a demo dataset."""
    P, S, A = ds.windows(horizon, n_obs)
    return np.concatenate([P.reshape(len(P), -1), S.reshape(len(S), -1)], axis=1), A.reshape(len(A), -1)


class DiffusionPolicy(RegressorMixin, BaseEstimator):
    def __init__(self, vr=True, beta=1e-9, epochs=300, batch_size=16, lr=1e-3, weight_decay=1e-6,
                 warmup_steps=50, horizon=16, n_obs=2, k_points=32, down_dims=(32, 64, 128),
                 inference_mode="stochastic", num_inference_steps=10, random_state=0):
        self.vr = vr
        self.beta = beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.horizon = horizon
        self.n_obs = n_obs
        self.k_points = k_points
        self.down_dims = down_dims
        self.inference_mode = inference_mode
        self.num_inference_steps = num_inference_steps
        self.random_state = random_state

    # -- shapes ------------------------------------------------------------
    @property
    def _obs_width(self) -> int:
        return self.n_obs * (self.k_points * envs.POINT_DIM + envs.PROPRIO_DIM)

    def _split(self, X):
        n, cut = len(X), self.n_obs * self.k_points * envs.POINT_DIM
        points = X[:, :cut].reshape(n, self.n_obs, self.k_points, envs.POINT_DIM)
        proprio = X[:, cut:].reshape(n, self.n_obs, envs.PROPRIO_DIM)
        return points, proprio

    def _check_X(self, X, fitting=False):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self._obs_width:
            raise ValueError(f"X has {X.shape[1]} columns; expected {self._obs_width} "
                             f"for n_obs={self.n_obs}, k_points={self.k_points}")
        if not fitting and X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, fitted with {self.n_features_in_}")
        return X

    # -- estimator API -------------------------------------------------------
    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, multi_output=True)
        X = self._check_X(X, fitting=True)
        if y.ndim != 2 or y.shape[1] != self.horizon * envs.ACTION_DIM:
            raise ValueError(f"y must have {self.horizon * envs.ACTION_DIM} columns (horizon x action dim)")
        self.n_features_in_ = X.shape[1]
        points, proprio = self._split(X)
        actions = y.reshape(len(y), self.horizon, envs.ACTION_DIM)
        self.proprio_norm_ = tr.RangeNormalizer().fit(proprio)
        self.action_norm_ = tr.RangeNormalizer().fit(actions)
        data = tr.TrainingData(points, self.proprio_norm_.transform(proprio), self.action_norm_.transform(actions))

        cfg = ModelConfig(
            horizon=self.horizon,
            encoder=EncoderConfig(k_points=self.k_points, n_obs=self.n_obs),
            unet=UNetConfig(down_dims=tuple(self.down_dims)),
            vr=VRConfig(enabled=bool(self.vr), beta=self.beta, inference_mode=self.inference_mode),
        )
        tcfg = tr.TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                              weight_decay=self.weight_decay, warmup_steps=self.warmup_steps,
                              horizon=self.horizon, n_obs=self.n_obs, eval_every=0)
        self.schedule_ = make_schedule("linear", 100)
        self.sampler_ = SamplerConfig(100, self.num_inference_steps)
        self.model_ = PolicyModel(cfg, seed=self.random_state)
        _, self.history_, _ = tr.train(self.model_, data, self.schedule_, self.beta, tcfg, self.random_state)
        return self

    def predict(self, X):
        """One sampled action chunk per row, flattened, in raw action units."""
        check_is_fitted(self, "model_")
        X = self._check_X(X)
        points, proprio = self._split(X)
        rngs = [stream(self.random_state, "estimator.predict", i) for i in range(len(X))]
        a = self.model_.sample(points, self.proprio_norm_.transform(proprio), self.schedule_, self.sampler_, rngs)
        return self.action_norm_.inverse_transform(a).reshape(len(X), -1)

    def as_policy(self) -> ModelPolicy:
        """The fitted network as a rollout policy for :mod:`vrdp.envs`."""
        check_is_fitted(self, "model_")
        stats = {"action": self.action_norm_.stats_, "proprio": self.proprio_norm_.stats_}
        return ModelPolicy(self.model_, stats, self.schedule_, self.sampler_)
