"""scikit-learn style wrappers around pretraining and alignment.

``FlowMatchingModel`` learns a velocity field from 2-D samples (optionally
labelled); ``SageGRPO`` fine-tunes a fitted model against a reward.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dynamics import StrategyKind, VarianceStrategy
from .errors import InvalidArgumentError
from .flownet import VelocityNet, flow_matching_pretrain, sample_ode
from .harness.config import RunConfig, parse_reward
from .harness.runners import align
from .rlcore import RewardSpec, rollout_group
from .schedule import build_schedule, linear_schedule


class _EmpiricalData:
    """Resamples rows of a fixed dataset; labels of -1 mean unconditional."""

    def __init__(self, X, y):
        self.X, self.y = X, y

    def sample(self, rng, n):
        idx = rng.integers(len(self.X), size=n)
        return self.X[idx], self.y[idx]


class FlowMatchingModel(BaseEstimator):
    """Rectified-flow velocity model trained by flow matching.

    ``y`` holds integer class labels in [0, n_classes); without labels the
    model is unconditional.
    """

    def __init__(self, hidden=(64, 64, 64), n_steps=5000, lr=0.1, batch_size=256,
                 cond_dropout=0.5, sigma_features=8, cond_features=8, random_state=0):
        self.hidden = hidden
        self.n_steps = n_steps
        self.lr = lr
        self.batch_size = batch_size
        self.cond_dropout = cond_dropout
        self.sigma_features = sigma_features
        self.cond_features = cond_features
        self.random_state = random_state

    def fit(self, X, y=None):
        if y is None:
            X = check_array(X, dtype=float)
            labels = np.full(len(X), -1)
            n_classes = 1
        else:
            X, labels = check_X_y(X, y, dtype=float)
            if not np.all(labels == np.round(labels)) or labels.min() < 0:
                raise InvalidArgumentError("labels must be non-negative integers")
            labels = labels.astype(int)
            n_classes = int(labels.max()) + 1
        seed = int(np.random.SeedSequence(self.random_state).generate_state(1)[0])
        net = VelocityNet(X.shape[1], tuple(self.hidden), n_classes, self.sigma_features,
                          self.cond_features)
        net.initialize(np.random.default_rng([seed, 1]))
        dropout = self.cond_dropout if y is not None else 0.0
        self.net_, self.loss_curve_ = flow_matching_pretrain(
            net, _EmpiricalData(X, labels), self.n_steps, self.lr, seed, self.batch_size, dropout)
        self.n_features_in_ = X.shape[1]
        self.n_classes_ = n_classes if y is not None else 0
        return self

    @classmethod
    def from_net(cls, net):
        """Wrap an already trained network (e.g. from a checkpoint)."""
        model = cls(hidden=tuple(net.hidden), sigma_features=net.sigma_width,
                    cond_features=net.cond_width)
        model.net_ = net
        model.loss_curve_ = np.array([])
        model.n_features_in_ = net.dim
        model.n_classes_ = net.n_conditions
        return model

    def predict(self, X, sigma=0.5, condition=None):
        """Velocity dx/dsigma at noise level ``sigma``."""
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise InvalidArgumentError(f"expected {self.n_features_in_} features")
        return self.net_.forward(X, sigma, condition)

    def sample(self, n, condition=None, T=50, random_state=None):
        """Deterministic Euler ODE samples from N(0, I)."""
        check_is_fitted(self, "net_")
        return sample_ode(self.net_, linear_schedule(T), n, condition, random_state)


class SageGRPO(BaseEstimator):
    """GRPO fine-tuning of a fitted FlowMatchingModel.

    ``reward`` is a RewardSpec or a "tag[:mode]=weight; ..." string resolved
    against ``mode_centers``. ``fit`` ignores X and y; they exist for
    pipeline compatibility.
    """

    def __init__(self, base_model=None, reward="target_mode:0=1.0", mode_centers=None,
                 strategy="precise", eta=0.3, regime="clamped", T=10, floor=3e-3,
                 group_size=8, n_updates=300, lr=1e-3, condition=None, equalize=True,
                 kl_mode="dual", anchor_interval=20, beta_pos=1.0, beta_vel=0.5,
                 lambda_min=1e-7, lambda_max=1e-5, warmup_steps=100, d_target=1e-2,
                 random_state=0):
        self.base_model = base_model
        self.reward = reward
        self.mode_centers = mode_centers
        self.strategy = strategy
        self.eta = eta
        self.regime = regime
        self.T = T
        self.floor = floor
        self.group_size = group_size
        self.n_updates = n_updates
        self.lr = lr
        self.condition = condition
        self.equalize = equalize
        self.kl_mode = kl_mode
        self.anchor_interval = anchor_interval
        self.beta_pos = beta_pos
        self.beta_vel = beta_vel
        self.lambda_min = lambda_min
        self.lambda_max = lambda_max
        self.warmup_steps = warmup_steps
        self.d_target = d_target
        self.random_state = random_state

    def _reward_spec(self):
        if isinstance(self.reward, RewardSpec):
            return self.reward
        if self.mode_centers is None:
            raise InvalidArgumentError("a reward string needs mode_centers")
        return parse_reward(self.reward, np.asarray(self.mode_centers, dtype=float))

    def _run_config(self, net):
        cfg = RunConfig()
        cfg.seed = int(self.random_state)
        cfg.schedule.regime, cfg.schedule.T, cfg.schedule.floor = self.regime, self.T, self.floor
        cfg.strategy.kind, cfg.strategy.eta = self.strategy, self.eta
        cfg.data.n_modes = net.n_conditions
        g = cfg.grpo
        g.group_size, g.updates, g.lr = self.group_size, self.n_updates, self.lr
        g.condition = -1 if self.condition is None else int(self.condition)
        g.equalize = bool(self.equalize)
        tr = cfg.trustregion
        tr.mode, tr.anchor_interval = self.kl_mode, self.anchor_interval
        tr.beta_pos, tr.beta_vel = self.beta_pos, self.beta_vel
        c = cfg.controller
        c.lambda_min, c.lambda_max = self.lambda_min, self.lambda_max
        c.warmup_steps, c.d_target = self.warmup_steps, self.d_target
        return cfg.validate()

    def fit(self, X=None, y=None):
        if self.base_model is None:
            raise InvalidArgumentError("SageGRPO needs a fitted base_model")
        check_is_fitted(self.base_model, "net_")
        net = self.base_model.net_.copy()
        cfg = self._run_config(net)
        result = align(cfg, net, reward=self._reward_spec())
        self.model_ = FlowMatchingModel.from_net(net)
        self.history_ = result.rows
        self.n_anchor_refreshes_ = result.anchor_refreshes
        return self

    def sample(self, n, random_state=None):
        """Final states of n stochastic rollouts under the aligned policy."""
        check_is_fitted(self, "model_")
        if n < 2:
            raise InvalidArgumentError("sample at least two points")
        schedule = build_schedule(self.regime, self.T, 1.0, self.floor)
        group = rollout_group(self.model_.net_, schedule,
                              VarianceStrategy(StrategyKind(self.strategy), self.eta),
                              self.condition, n, seed=0 if random_state is None else random_state)
        return group.final
