"""scikit-learn style facade over one training run.

``fit`` trains a policy and certificate in simulation; there is no
supervised ``(X, y)`` data, so ``X`` and ``y`` are accepted and ignored.
``predict`` maps observations to deterministic actions, and
``certificate`` scores ``(d, d_dot)`` feature rows with the learned energy
function.
"""

from __future__ import annotations

import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from . import safety_index as si
from .agent import act
from .config import MODES, preset, with_mode
from .train import load_checkpoint, run_seed


class SafeMR(BaseEstimator):
    """Joint policy and safety-certificate synthesis with magnitude regularisation.

    Parameters
    ----------
    preset : str
        Named experiment preset, e.g. ``"desk-pillars-0.15-goal"``.
    mode : str
        ``"safemr"``, ``"jointsis"``, ``"fac_phi0"`` or ``"fac_phih"``.
    a, b : float
        Regulariser weights on ``(sigma + d_min)^n`` and on ``k``.
    total_env_steps : int or None
        Override the preset's training budget.
    random_state : int
    output_dir : str or None
        Where the run is written; a temporary directory when None.
    """

    def __init__(self, preset="desk-pillars-0.15-goal", mode="safemr", a=0.35, b=0.15,
                 total_env_steps=None, random_state=0, output_dir=None):
        self.preset = preset
        self.mode = mode
        self.a = a
        self.b = b
        self.total_env_steps = total_env_steps
        self.random_state = random_state
        self.output_dir = output_dir

    def _config(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        cfg = with_mode(preset(self.preset), self.mode, a=float(self.a), b=float(self.b))
        if self.total_env_steps is not None:
            steps = int(self.total_env_steps)
            if steps <= 0:
                raise ValueError("total_env_steps must be positive")
            warm = min(cfg.run.warmup_steps, max(steps // 2, 1))
            cfg = replace(cfg, run=replace(cfg.run, total_env_steps=steps, warmup_steps=warm))
        return cfg

    def fit(self, X=None, y=None):
        cfg = self._config()
        out = Path(self.output_dir) if self.output_dir else Path(tempfile.mkdtemp(prefix="safemr-"))
        self.summary_ = run_seed(cfg, int(self.random_state), out)
        nets, params, env_cfg, _ = load_checkpoint(out / "checkpoint")
        self.nets_ = nets
        self.params_ = params
        self.env_config_ = env_cfg
        self.n_features_in_ = env_cfg.obs_dim
        self.run_dir_ = out
        return self

    def _check_fitted(self):
        if not hasattr(self, "nets_"):
            raise NotFittedError("call fit before using this estimator")

    def predict(self, X):
        """Deterministic actions for a batch of observations, shape (n, act_dim)."""
        self._check_fitted()
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} observation features, "
                             f"got {X.shape[1]}")
        return act(self.nets_, X, "deterministic")

    def certificate(self, F):
        """Energy values for rows of ``(d, d_dot)``."""
        self._check_fitted()
        F = check_array(F, dtype=np.float64)
        if F.shape[1] != 2:
            raise ValueError("certificate expects two columns: d and d_dot")
        return si.phi(self.params_, np.maximum(F[:, 0], si.D_FLOOR), F[:, 1])

    @property
    def zeta_(self):
        self._check_fitted()
        return self.params_.zeta
