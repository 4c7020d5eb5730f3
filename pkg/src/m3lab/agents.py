"""Agents: all-actions actor-critic with model-generated targets, and DQN.

The critic ``Q(s, .)`` is a network with one output per action. Its
targets come either from the observed trajectory (model-free H-step
return) or from ``K`` model rollouts that start with the action actually
taken, each scored as predicted H-step reward plus the critic at the last
predicted state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .envs import Env, run_episode
from .models import (HallucinatedModel, M3Model, ModelConfig, OneStepModel,
                     TransitionDataset)
from .rollout import rollout_batch, sample_actions

log = logging.getLogger(__name__)

MODEL_KINDS = ("none", "one-step", "m3", "hallucinated")


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class UniformPolicy:
    def __init__(self, num_actions: int):
        self.num_actions = num_actions

    def probs(self, S) -> np.ndarray:
        S = np.atleast_2d(S)
        return np.full((len(S), self.num_actions), 1.0 / self.num_actions)


class FunctionPolicy:
    """Wraps ``fn(states) -> (n, A)`` probabilities."""

    def __init__(self, num_actions: int, fn):
        self.num_actions, self.fn = num_actions, fn

    def probs(self, S) -> np.ndarray:
        return self.fn(np.atleast_2d(S))


class PolicyNet:
    """Softmax policy over a small network; inputs are normalized by ``scale``."""

    def __init__(self, state_dim: int, num_actions: int, scale=None, hidden=(64,),
                 seed: int = 0, lr: float = 1e-3):
        self.num_actions = num_actions
        self.scale = np.ones(state_dim) if scale is None else np.asarray(scale, dtype=float)
        self.net = nn.init_network([state_dim, *hidden, num_actions], seed)
        self.opt = nn.Adam(lr)

    def logits(self, S) -> np.ndarray:
        return nn.forward(self.net, np.atleast_2d(S) / self.scale)

    def probs(self, S) -> np.ndarray:
        return softmax(self.logits(S))

    def sample(self, s, rng) -> int:
        return int(sample_actions(self.probs(s), rng)[0])


class CriticNet:
    """``Q(s, .)`` for all actions; the network predicts ``Q / value_scale``."""

    def __init__(self, state_dim: int, num_actions: int, scale=None, hidden=(64,),
                 seed: int = 0, lr: float = 1e-3, value_scale: float = 1.0):
        self.num_actions = num_actions
        self.scale = np.ones(state_dim) if scale is None else np.asarray(scale, dtype=float)
        self.value_scale = value_scale
        self.net = nn.init_network([state_dim, *hidden, num_actions], seed)
        self.opt = nn.Adam(lr)
        self.updates = 0

    def values(self, S) -> np.ndarray:
        return nn.forward(self.net, np.atleast_2d(S) / self.scale) * self.value_scale

    def semi_gradient(self, S, A, targets) -> list[np.ndarray]:
        """Gradient of ``0.5 * mean (Q(s,a) - target)^2`` on the chosen outputs only."""
        S = np.atleast_2d(S)
        A = np.asarray(A, dtype=int).reshape(-1)
        targets = np.asarray(targets, dtype=float).reshape(-1)
        if not np.all(np.isfinite(targets)):
            raise nn.NonFiniteError("non-finite critic target")
        y, acts = nn.forward_cached(self.net, S / self.scale)
        rows = np.arange(len(A))
        dy = np.zeros_like(y)
        dy[rows, A] = (y[rows, A] * self.value_scale - targets) / len(A)
        return nn.backprop(self.net, acts, dy)

    def update(self, S, A, targets) -> None:
        self.opt.step(self.net, self.semi_gradient(S, A, targets))
        self.updates += len(np.atleast_1d(A))

    def copy(self) -> "CriticNet":
        other = CriticNet.__new__(CriticNet)
        other.__dict__.update(self.__dict__)
        other.net = self.net.copy()
        other.opt = nn.Adam(self.opt.lr)
        return other


class TabularQ:
    """Lookup-table ``Q`` over an enumerable (gridworld) state space."""

    def __init__(self, grid, init: float = 0.0):
        self.grid = grid
        self.num_actions = grid.spec.num_actions
        self.table = np.full((grid.num_states, self.num_actions), float(init))

    def values(self, S) -> np.ndarray:
        return self.table[self.grid.index(S)]

    def q_learning(self, s, a, r, s2, done, alpha: float, gamma: float) -> None:
        i = self.grid.index(s)[0]
        target = r if done else r + gamma * self.values(s2)[0].max()
        self.table[i, a] += alpha * (target - self.table[i, a])


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform sampling without replacement."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.S = np.zeros((capacity, state_dim))
        self.A = np.zeros(capacity, dtype=int)
        self.R = np.zeros(capacity)
        self.S2 = np.zeros((capacity, state_dim))
        self.D = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        i = self._next
        self.S[i], self.A[i], self.R[i], self.S2[i], self.D[i] = s, a, r, s2, done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        if batch_size > self.size:
            raise ValueError(f"replay holds {self.size} transitions, need {batch_size}")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return self.S[idx], self.A[idx], self.R[idx], self.S2[idx], self.D[idx]


# ---------------------------------------------------------------------------
# actor-critic pieces

def critic_targets(S, A, model, policy, critic, H: int, K: int, rng, env=None) -> np.ndarray:
    """Model-based H-step targets, averaged over ``K`` rollouts per row."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if model.kind == "m3" and H > model.horizon:
        raise ValueError(f"H={H} exceeds model horizon {model.horizon}")
    S = np.atleast_2d(np.asarray(S, dtype=float))
    n = len(S)
    S_rep = np.repeat(S, K, axis=0)
    A_rep = np.repeat(np.asarray(A, dtype=int).reshape(-1), K)
    roll = rollout_batch(model, S_rep, policy, H, rng, first_actions=A_rep, env=env)
    last = roll.states[:, H - 1]
    a_next = sample_actions(policy.probs(last), rng)
    boot = critic.values(last)[np.arange(len(last)), a_next]
    G = roll.cum_rewards[:, H - 1] + np.where(roll.done[:, H - 1], 0.0, boot)
    return G.reshape(n, K).mean(axis=1)


def critic_target_GH(s_t, a_t, model, policy, critic, H: int, K: int, rng, env=None) -> float:
    return float(critic_targets(np.asarray(s_t)[None, :], [a_t], model, policy, critic,
                                H, K, rng, env)[0])


def critic_update(critic: CriticNet, s_t, a_t, target: float, lr: float) -> CriticNet:
    """One plain semi-gradient step ``theta += lr * (G - Q(s,a)) * grad Q(s,a)``."""
    if not np.isfinite(target):
        raise nn.NonFiniteError("non-finite critic target")
    grads = critic.semi_gradient(np.asarray(s_t)[None, :], [a_t], [target])
    nn.SGD(lr).step(critic.net, grads)
    critic.updates += 1
    return critic


def actor_gradient(policy: PolicyNet, critic, S) -> list[np.ndarray]:
    """Descent direction for ``-sum_a pi(a|s) (Q(s,a) - mean_a Q(s,.))``, batch mean."""
    S = np.atleast_2d(S)
    z, acts = nn.forward_cached(policy.net, S / policy.scale)
    p = softmax(z)
    Q = critic.values(S)
    adv = Q - Q.mean(axis=1, keepdims=True)
    dz = p * (adv - (p * adv).sum(axis=1, keepdims=True))
    return nn.backprop(policy.net, acts, -dz / len(S))


def actor_update(policy: PolicyNet, critic, s, lr: float | None = None) -> PolicyNet:
    """One all-actions ascent step; plain SGD when ``lr`` is given, else the policy's Adam."""
    grads = actor_gradient(policy, critic, s)
    if lr is None:
        policy.opt.step(policy.net, grads)
    else:
        nn.SGD(lr).step(policy.net, grads)
    return policy


def n_step_returns(episode, critic, policy, H: int, rng) -> np.ndarray:
    """Model-free ``sum_{i<H} r_{t+i} + Q(s_{t+H}, a_{t+H})`` along the recorded trajectory."""
    T = len(episode)
    csum = np.concatenate([[0.0], np.cumsum(episode.rewards)])
    t = np.arange(T)
    end = np.minimum(t + H, T)
    G = csum[end] - csum[t]
    inside = t + H < T
    if inside.any():
        idx = t[inside] + H
        G[inside] += critic.values(episode.states[idx])[np.arange(idx.size),
                                                         episode.actions[idx]]
    if episode.truncated and (~inside).any():
        last = episode.next_states[-1][None, :]
        a = sample_actions(policy.probs(last), rng)[0]
        G[~inside] += critic.values(last)[0, a]
    return G


# ---------------------------------------------------------------------------
# actor-critic driver

@dataclass
class ACConfig:
    hidden: tuple[int, ...] = (64,)
    actor_lr: float = 1e-3
    critic_lr: float = 3e-3
    value_scale: float = 100.0
    batch_size: int = 32
    critic_passes: int = 1
    model_steps: int = 40          # minibatch steps per head after each episode
    model: ModelConfig = field(default_factory=ModelConfig)
    terminal_from_env: bool = True  # stop predicted rollouts at predicted terminal states


@dataclass
class LearningCurve:
    returns: list[float]
    lengths: list[int]
    wall_ms: list[float]
    critic_updates: int
    env_steps: int
    model_kind: str
    H: int
    K: int
    seed: int

    @property
    def auc(self) -> float:
        return float(np.mean(self.returns))


def make_model(kind: str, env: Env, H: int, cfg: ModelConfig):
    if kind == "one-step":
        return OneStepModel(env, cfg)
    if kind == "hallucinated":
        return HallucinatedModel(env, cfg)
    if kind == "m3":
        return M3Model(env, H, cfg)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def run_actor_critic(env: Env, model_kind: str, H: int, K: int, episodes: int, seed: int,
                     config: ACConfig | None = None) -> LearningCurve:
    import time

    cfg = config or ACConfig()
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {model_kind!r}")
    if H < 1 or K < 1 or episodes < 1:
        raise ValueError("H, K and episodes must be >= 1")
    spec = env.spec
    rng = np.random.default_rng([seed, 0])
    policy = PolicyNet(spec.state_dim, spec.num_actions, spec.scale, cfg.hidden,
                       seed=int(np.random.default_rng([seed, 1]).integers(2 ** 63)),
                       lr=cfg.actor_lr)
    critic = CriticNet(spec.state_dim, spec.num_actions, spec.scale, cfg.hidden,
                       seed=int(np.random.default_rng([seed, 2]).integers(2 ** 63)),
                       lr=cfg.critic_lr, value_scale=cfg.value_scale)
    mcfg = ModelConfig(**{**cfg.model.__dict__, "seed": seed})
    model = None if model_kind == "none" else make_model(model_kind, env, H, mcfg)
    data = TransitionDataset([], H)
    term_env = env if cfg.terminal_from_env else None
    returns, lengths, wall = [], [], []
    steps = 0
    for ep_i in range(episodes):
        t0 = time.perf_counter()
        ep = run_episode(env, policy.sample, rng)
        steps += len(ep)
        if model is not None:
            data.add(ep)
            model.fit(data, steps=cfg.model_steps)
        for _ in range(cfg.critic_passes):
            if model is None:
                G = n_step_returns(ep, critic, policy, H, rng)
            order = rng.permutation(len(ep))
            for lo in range(0, len(ep), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                if model is None:
                    tgt = G[idx]
                else:
                    tgt = critic_targets(ep.states[idx], ep.actions[idx], model, policy,
                                         critic, H, K, rng, term_env)
                critic.update(ep.states[idx], ep.actions[idx], tgt)
        order = rng.permutation(len(ep))
        for lo in range(0, len(ep), cfg.batch_size):
            actor_update(policy, critic, ep.states[order[lo:lo + cfg.batch_size]])
        returns.append(ep.total_return)
        lengths.append(len(ep))
        wall.append((time.perf_counter() - t0) * 1e3)
    # every kind performs exactly one critic sample-update per env step per pass
    assert critic.updates == steps * cfg.critic_passes
    return LearningCurve(returns, lengths, wall, critic.updates, steps, model_kind, H, K, seed)


# ---------------------------------------------------------------------------
# DQN pieces

def epsilon_greedy(q, s, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(q.num_actions))
    return int(np.argmax(q.values(s)[0]))


def dqn_targets(target_q, R, S2, D, gamma: float) -> np.ndarray:
    return R + gamma * target_q.values(S2).max(axis=1) * (1.0 - D)


def dqn_update(q: CriticNet, target_q: CriticNet, replay: ReplayBuffer, batch_size: int,
               gamma: float, rng: np.random.Generator, lr: float | None = None) -> CriticNet:
    """One semi-gradient step toward ``r + gamma * max_a' Q_target(s', a') * (1 - done)``."""
    if len(replay) < batch_size:
        raise ValueError(f"replay holds {len(replay)} transitions, need {batch_size}")
    S, A, R, S2, D = replay.sample(batch_size, rng)
    tgt = dqn_targets(target_q, R, S2, D, gamma)
    if lr is None:
        q.update(S, A, tgt)
    else:
        nn.SGD(lr).step(q.net, q.semi_gradient(S, A, tgt))
        q.updates += len(A)
    return q


def sync_target(q: CriticNet, target_q: CriticNet) -> None:
    target_q.net = q.net.copy()
