"""Constrained soft actor-critic pieces: replay buffer, critics, policy and
the state-dependent multiplier network.

Losses (batch means, ``a ~ pi(.|s)`` reparameterised):

* reward critics:  (Q_i(s, a) - [r + gamma (1 - done)(min Qbar(s', a') - alpha log pi(a'|s'))])^2
* constraint critic: (Q_c(s, a) - residual_zeta(s, s'))^2
* policy:      alpha log pi(a|s) - min Q(s, a) + lambda(s) Q_c(s, a)   (descent)
* multiplier:  lambda(s) Q_c(s, a)                                    (ascent)
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import safety_index as si
from .approximator import (ApproxFn, GradStep, NumericError, SquashedGaussian,
                           apply_step, mlp)


@dataclass
class AgentConfig:
    hidden: tuple = (64, 64)
    multiplier_hidden: tuple = (64,)
    activation: str = "tanh"
    alpha: float = 0.1
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 256
    buffer_capacity: int = 100_000
    lr_critic: float = 1e-3
    lr_policy: float = 3e-4
    lr_multiplier: float = 1e-4
    multiplier_init: float = 0.0
    # off: the constraint critic regresses the one-step residual
    constraint_bootstrap: bool = False
    # lower clip on constraint-critic targets; -inf keeps the raw residual
    qc_target_floor: float = -math.inf

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["multiplier_hidden"] = list(self.multiplier_hidden)
        return d


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    feat_now: si.DistanceFeature
    feat_next: si.DistanceFeature
    violation: bool
    done: bool


class ReplayBuffer:
    """FIFO ring buffer over flat numpy columns.

    One writer and one reader may share an instance; ``add`` and ``sample``
    take a lock.
    """

    def __init__(self, capacity, obs_dim, act_dim, seed=0):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, act_dim))
        self.reward = np.zeros(capacity)
        self.d = np.zeros(capacity)
        self.d_dot = np.zeros(capacity)
        self.d_next = np.zeros(capacity)
        self.d_dot_next = np.zeros(capacity)
        self.violation = np.zeros(capacity, dtype=bool)
        self.done = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0
        self.inserted = 0
        self.rng = np.random.default_rng(seed)
        self._lock = threading.Lock()

    def __len__(self):
        return self.size

    def add(self, tr):
        with self._lock:
            i = self.cursor
            self.obs[i] = tr.obs
            self.next_obs[i] = tr.next_obs
            self.action[i] = tr.action
            self.reward[i] = tr.reward
            self.d[i], self.d_dot[i] = tr.feat_now.d, tr.feat_now.d_dot
            self.d_next[i], self.d_dot_next[i] = tr.feat_next.d, tr.feat_next.d_dot
            self.violation[i] = tr.violation
            self.done[i] = tr.done
            self.cursor = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
            self.inserted += 1

    def sample(self, batch_size):
        with self._lock:
            if self.size == 0:
                raise ValueError("cannot sample from an empty buffer")
            idx = self.rng.integers(0, self.size, size=batch_size)
            return self.take(idx)

    def take(self, idx):
        return {k: getattr(self, k)[idx] for k in
                ("obs", "next_obs", "action", "reward", "d", "d_dot",
                 "d_next", "d_dot_next", "violation", "done")}


@dataclass
class AgentNets:
    policy: ApproxFn
    q1: ApproxFn
    q2: ApproxFn
    qc: ApproxFn
    multiplier: ApproxFn
    q1_target: ApproxFn
    q2_target: ApproxFn
    qc_target: ApproxFn
    head: SquashedGaussian
    cfg: AgentConfig
    opt: dict = field(default_factory=dict)

    @classmethod
    def build(cls, obs_dim, act_dim, cfg, rng, action_low=-1.0, action_high=1.0):
        hid = tuple(cfg.hidden)
        act = cfg.activation
        policy = mlp(obs_dim, hid, 2 * act_dim, rng, act, "squash_gaussian")
        q1 = mlp(obs_dim + act_dim, hid, 1, rng, act)
        q2 = mlp(obs_dim + act_dim, hid, 1, rng, act)
        qc = mlp(obs_dim + act_dim, hid, 1, rng, act)
        multiplier = mlp(obs_dim, tuple(cfg.multiplier_hidden), 1, rng, act, "nonneg")
        # start lambda(s) near multiplier_init: softplus^-1 on the output bias
        target = max(cfg.multiplier_init, 1e-6)
        multiplier.weights[-1] = np.log(np.expm1(target)) if target < 30 else target
        low = np.full(act_dim, action_low)
        high = np.full(act_dim, action_high)
        nets = cls(policy, q1, q2, qc, multiplier, q1.copy(), q2.copy(), qc.copy(),
                   SquashedGaussian(low, high), cfg)
        nets.opt = {
            "q1": GradStep(cfg.lr_critic, q1.n_params),
            "q2": GradStep(cfg.lr_critic, q2.n_params),
            "qc": GradStep(cfg.lr_critic, qc.n_params),
            "policy": GradStep(cfg.lr_policy, policy.n_params),
            "multiplier": GradStep(cfg.lr_multiplier, multiplier.n_params),
        }
        return nets

    @property
    def act_dim(self):
        return self.head.dim

    def trainable(self):
        return {"q1": self.q1, "q2": self.q2, "qc": self.qc,
                "policy": self.policy, "multiplier": self.multiplier}

    def lam(self, obs):
        return self.multiplier.forward(obs)[..., 0]

    # -- checkpointing ---------------------------------------------------------

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, net in {**self.trainable(), "q1_target": self.q1_target,
                          "q2_target": self.q2_target, "qc_target": self.qc_target}.items():
            net.save(directory / name)
        arrays = {}
        meta = {}
        for name, o in self.opt.items():
            st = o.state_dict()
            arrays[f"{name}_m"] = st.pop("m")
            arrays[f"{name}_v"] = st.pop("v")
            meta[name] = st
        np.savez(directory / "optimizer.npz", **arrays)
        (directory / "agent.json").write_text(json.dumps({
            "config": self.cfg.to_dict(), "optimizer": meta,
            "action_low": self.head.low.tolist(), "action_high": self.head.high.tolist(),
        }, indent=2))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "agent.json").read_text())
        cfg_d = meta["config"]
        cfg_d["hidden"] = tuple(cfg_d["hidden"])
        cfg_d["multiplier_hidden"] = tuple(cfg_d["multiplier_hidden"])
        cfg = AgentConfig(**cfg_d)
        nets = {name: ApproxFn.load(directory / name) for name in
                ("policy", "q1", "q2", "qc", "multiplier",
                 "q1_target", "q2_target", "qc_target")}
        head = SquashedGaussian(meta["action_low"], meta["action_high"])
        out = cls(head=head, cfg=cfg, **nets)
        arrays = np.load(directory / "optimizer.npz")
        for name, st in meta["optimizer"].items():
            out.opt[name] = GradStep.from_state(
                {**st, "m": arrays[f"{name}_m"], "v": arrays[f"{name}_v"]})
        return out


def _sa(obs, action):
    return np.concatenate([obs, action], axis=1)


def _check_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite {what}")


def constraint_targets(batch, params):
    """One-step energy-descent residual for every transition in the batch."""
    return si.residual(params, batch["d"], batch["d_dot"],
                       batch["d_next"], batch["d_dot_next"])


def critic_update(nets, batch, params, rng):
    """Regress both reward critics and the constraint critic once, then
    move the target networks toward the live ones."""
    cfg = nets.cfg
    obs, act, nobs = batch["obs"], batch["action"], batch["next_obs"]
    B = obs.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    not_done = 1.0 - batch["done"].astype(np.float64)

    head_next = nets.policy.forward(nobs)
    noise = rng.standard_normal((B, nets.act_dim))
    a_next, logp_next, _ = nets.head.sample(head_next, noise)
    sa_next = _sa(nobs, a_next)
    q_next = np.minimum(nets.q1_target.forward(sa_next)[:, 0],
                        nets.q2_target.forward(sa_next)[:, 0])
    y = batch["reward"] + cfg.gamma * not_done * (q_next - cfg.alpha * logp_next)
    g = constraint_targets(batch, params)
    if cfg.constraint_bootstrap:
        g = g + cfg.gamma * not_done * nets.qc_target.forward(sa_next)[:, 0]
    g = np.maximum(g, cfg.qc_target_floor)

    sa = _sa(obs, act)
    losses = {}
    for name, net, target in (("q1", nets.q1, y), ("q2", nets.q2, y), ("qc", nets.qc, g)):
        pred, cache = net.forward_cached(sa)
        err = pred[:, 0] - target
        loss = float(np.mean(err * err))
        _check_finite(loss, f"{name} loss")
        gw, _ = net.backward(cache, (2.0 / B) * err[:, None])
        apply_step(net.weights, gw, nets.opt[name], "descent")
        losses[name] = loss
    soft_update(nets, cfg.tau)
    return losses


def soft_update(nets, tau):
    for live, tgt in ((nets.q1, nets.q1_target), (nets.q2, nets.q2_target),
                      (nets.qc, nets.qc_target)):
        tgt.weights *= 1.0 - tau
        tgt.weights += tau * live.weights


def policy_and_multiplier_grads(nets, batch, rng, need_policy=True, need_multiplier=True):
    """Return ``(G_theta, G_xi, info)`` for the shared Lagrangian.

    ``G_theta`` is the gradient of the policy loss with the multiplier held
    fixed; ``G_xi`` the gradient of ``mean(lambda(s) Q_c(s, a))`` with the
    policy held fixed. Either can be skipped (returned as ``None``).
    """
    cfg = nets.cfg
    obs = batch["obs"]
    B = obs.shape[0]
    head_out, pcache = nets.policy.forward_cached(obs)
    noise = rng.standard_normal((B, nets.act_dim))
    a, logp, scache = nets.head.sample(head_out, noise)
    sa = _sa(obs, a)
    lam_out, lcache = nets.multiplier.forward_cached(obs)
    lam = lam_out[:, 0]
    qc, qc_cache = nets.qc.forward_cached(sa)
    qc = qc[:, 0]
    info = {"mean_lambda": float(lam.mean()), "mean_qc": float(qc.mean()),
            "entropy": float(-logp.mean())}

    g_theta = None
    if need_policy:
        q1, c1 = nets.q1.forward_cached(sa)
        q2, c2 = nets.q2.forward_cached(sa)
        use1 = q1[:, 0] <= q2[:, 0]
        qmin = np.where(use1, q1[:, 0], q2[:, 0])
        # d(-min Q)/da, taken through whichever critic is the min
        w1 = use1.astype(np.float64)
        _, gx1 = nets.q1.backward(c1, (-w1 / B)[:, None])
        _, gx2 = nets.q2.backward(c2, (-(1.0 - w1) / B)[:, None])
        _, gxc = nets.qc.backward(qc_cache, (lam / B)[:, None])
        od = obs.shape[1]
        d_action = gx1[:, od:] + gx2[:, od:] + gxc[:, od:]
        d_logp = np.full(B, cfg.alpha / B)
        d_head = nets.head.backward(scache, d_action, d_logp)
        g_theta, _ = nets.policy.backward(pcache, d_head)
        _check_finite(g_theta, "policy gradient")
        info["policy_loss"] = float(np.mean(cfg.alpha * logp - qmin + lam * qc))

    g_xi = None
    if need_multiplier:
        g_xi, _ = nets.multiplier.backward(lcache, (qc / B)[:, None])
        _check_finite(g_xi, "multiplier gradient")
    return g_theta, g_xi, info


def act(nets, obs, mode="deterministic", rng=None):
    """Action(s) from the policy; always inside the action box."""
    head_out = nets.policy.forward(obs)
    if mode == "deterministic":
        return nets.head.deterministic(head_out)
    if mode != "stochastic":
        raise ValueError(f"mode must be stochastic or deterministic, got {mode!r}")
    if rng is None:
        raise ValueError("stochastic mode needs an rng")
    noise = rng.standard_normal(head_out.shape[:-1] + (nets.act_dim,))
    a, _, _ = nets.head.sample(head_out, noise)
    return a
