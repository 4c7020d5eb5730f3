"""Learned transition models.

Four families share one calling convention, ``predict_batch(S, A)`` with
``S`` of shape ``(n, d)`` and an action block ``A`` of shape ``(n, h)``:

* :class:`OneStepModel` -- one network pair for ``(s, a) -> s'``.
* :class:`M3Model` -- one network pair per horizon ``h``, each mapping the
  start state and an h-hot action sequence straight to the state ``h`` steps
  later, plus the cumulative reward over those steps.
* :class:`HallucinatedModel` -- a one-step model that is also trained on its
  own composed predictions.
* :class:`EMModel` -- ``M`` component networks per horizon fitted by EM; it
  is sampled rather than evaluated.

Networks regress normalized state deltas (``(s' - s) / scale``) and the
mean per-step reward; predictions are mapped back and clipped to the
environment box.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from . import nn
from .envs import Env, Episode, GridWorld, make_env

log = logging.getLogger(__name__)

TRANSITION, REWARD, TRAIN = 0, 1, 2


# ---------------------------------------------------------------------------
# action sequences

def h_hot(actions, H: int, num_actions: int) -> np.ndarray:
    """Encode ``(n, h)`` action blocks as H one-hot blocks; blocks past h are zero."""
    A = np.atleast_2d(np.asarray(actions, dtype=int))
    n, h = A.shape
    if h > H:
        raise ValueError(f"sequence length {h} exceeds encoding horizon {H}")
    if A.size and (A.min() < 0 or A.max() >= num_actions):
        raise ValueError("action index out of range")
    out = np.zeros((n, H * num_actions))
    rows = np.repeat(np.arange(n), h)
    cols = (np.arange(h) * num_actions + A).ravel()
    out[rows, cols] = 1.0
    return out


def decode_h_hot(code, H: int, num_actions: int) -> list[int]:
    blocks = np.asarray(code).reshape(H, num_actions)
    return [int(b.argmax()) for b in blocks if b.any()]


@dataclass(frozen=True)
class ActionSequence:
    actions: tuple[int, ...]

    def __len__(self):
        return len(self.actions)

    def encode(self, H: int, num_actions: int) -> np.ndarray:
        return h_hot([list(self.actions)], H, num_actions)[0]


# ---------------------------------------------------------------------------
# dataset

@dataclass
class SequenceSamples:
    states: np.ndarray       # (n, d) start states
    actions: np.ndarray      # (n, h)
    targets: np.ndarray      # (n, d) state h steps later
    cum_rewards: np.ndarray  # (n,)

    def __len__(self):
        return len(self.cum_rewards)


class TransitionDataset:
    """Recorded episodes plus the derived (s, a_1..a_h, s_{+h}, sum r) samples.

    Samples never leave their episode, so none spans a terminal transition.
    """

    def __init__(self, episodes, H: int):
        if H < 1:
            raise ValueError("H must be >= 1")
        self.H = H
        self.episodes: list[Episode] = []
        self._cache: dict[int, SequenceSamples] = {}
        for ep in episodes:
            self.add(ep)

    def add(self, episode: Episode) -> None:
        if len(episode):
            self.episodes.append(episode)
            self._cache.clear()

    @property
    def num_transitions(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def count(self, h: int) -> int:
        return sum(max(len(ep) - h + 1, 0) for ep in self.episodes)

    def samples(self, h: int) -> SequenceSamples:
        if not 1 <= h <= self.H:
            raise ValueError(f"h={h} outside [1, {self.H}]")
        if h not in self._cache:
            S, A, T, R = [], [], [], []
            for ep in self.episodes:
                T_len = len(ep)
                if T_len < h:
                    continue
                starts = np.arange(T_len - h + 1)
                S.append(ep.states[starts])
                A.append(np.stack([ep.actions[starts + k] for k in range(h)], axis=1))
                end = starts + h - 1
                T.append(ep.next_states[end])
                csum = np.concatenate([[0.0], np.cumsum(ep.rewards)])
                R.append(csum[starts + h] - csum[starts])
            if S:
                self._cache[h] = SequenceSamples(np.concatenate(S), np.concatenate(A),
                                                 np.concatenate(T), np.concatenate(R))
            else:
                d = self.episodes[0].states.shape[1] if self.episodes else 0
                self._cache[h] = SequenceSamples(np.zeros((0, d)), np.zeros((0, h), dtype=int),
                                                 np.zeros((0, d)), np.zeros(0))
        return self._cache[h]


def build_dataset(episodes, H: int) -> TransitionDataset:
    if H < 1:
        raise ValueError("H must be >= 1")
    episodes = list(episodes)
    if not episodes:
        raise ValueError("no episodes")
    return TransitionDataset(episodes, H)


# ---------------------------------------------------------------------------
# configuration and heads

@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (64,)
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    loss: str = "l2"
    seed: int = 0
    reward_source: str = "learned"   # learned | oracle
    action_blocks: int | None = None  # one-step encoding width (blocks); default 1
    halluc_depth: int = 4
    halluc_ratio: float = 1.0         # hallucinated : real minibatch share
    em_components: int = 4
    em_iters: int = 10
    em_sigma: float = 0.5
    em_mstep_steps: int = 200

    def __post_init__(self):
        if self.reward_source not in ("learned", "oracle"):
            raise ValueError(f"reward_source must be learned|oracle, got {self.reward_source!r}")
        if self.loss not in nn.LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def _seed_of(seed: int, *key: int) -> int:
    return int(_rng(seed, *key).integers(2 ** 63))


class Head:
    """Networks for one horizon: state delta and mean per-step reward."""

    def __init__(self, env: Env, h: int, blocks: int, cfg: ModelConfig):
        self.env, self.h, self.blocks, self.cfg = env, h, blocks, cfg
        spec = env.spec
        n_in = spec.state_dim + blocks * spec.num_actions
        sizes = [n_in, *cfg.hidden]
        self.transition = nn.Regressor(
            nn.init_network(sizes + [spec.state_dim], _seed_of(cfg.seed, h, TRANSITION)),
            nn.Adam(cfg.lr), cfg.loss)
        self.reward = nn.Regressor(
            nn.init_network(sizes + [1], _seed_of(cfg.seed, h, REWARD)),
            nn.Adam(cfg.lr), cfg.loss)
        self.train_rng = _rng(cfg.seed, h, TRAIN)
        self.trained = False

    def inputs(self, S, A) -> np.ndarray:
        spec = self.env.spec
        return np.hstack([np.asarray(S, dtype=float) / spec.scale,
                          h_hot(A, self.blocks, spec.num_actions)])

    def targets(self, S, T, R):
        return (T - S) / self.env.spec.scale, (R / self.h)[:, None]

    def predict(self, S, A):
        X = self.inputs(S, A)
        delta = nn.forward(self.transition.net, X) * self.env.spec.scale
        nxt = self.env.clip(np.asarray(S, dtype=float) + delta)
        rew = nn.forward(self.reward.net, X)[:, 0] * self.h
        return nxt, rew

    def train_arrays(self, S, A, T, R, epochs=None, steps=None) -> list[float]:
        if len(S) == 0:
            raise ValueError(f"no training samples for horizon {self.h}")
        X = self.inputs(S, A)
        dY, rY = self.targets(S, T, R)
        cfg = self.cfg
        if steps is not None:
            lt = self.transition.fit(X, dY, steps, cfg.batch_size, self.train_rng)
            self.reward.fit(X, rY, steps, cfg.batch_size, self.train_rng)
            trace = [lt]
        else:
            trace = self.transition.fit_epochs(X, dY, cfg.epochs if epochs is None else epochs,
                                               cfg.batch_size, self.train_rng)
            self.reward.fit_epochs(X, rY, cfg.epochs if epochs is None else epochs,
                                   cfg.batch_size, self.train_rng)
        self.trained = True
        return trace

    def fit(self, data: TransitionDataset, epochs=None, steps=None) -> list[float]:
        smp = data.samples(self.h)
        return self.train_arrays(smp.states, smp.actions, smp.targets, smp.cum_rewards,
                                 epochs, steps)

    def to_dict(self) -> dict:
        return {"h": self.h, "transition": nn.to_snapshot(self.transition.net),
                "reward": nn.to_snapshot(self.reward.net), "trained": self.trained}

    def load_dict(self, d: dict) -> None:
        self.transition.net = nn.from_snapshot(d["transition"])
        self.reward.net = nn.from_snapshot(d["reward"])
        self.trained = bool(d.get("trained", True))


def _oracle_cum_reward(env: Env, chain_states: list[np.ndarray], A: np.ndarray) -> np.ndarray:
    total = np.zeros(len(A))
    for k in range(A.shape[1]):
        total += env.reward(chain_states[k], A[:, k], chain_states[k + 1])
    return total


# ---------------------------------------------------------------------------
# deterministic models

class OneStepModel:
    kind = "one-step"

    def __init__(self, env: Env, cfg: ModelConfig | None = None):
        self.env = env
        self.cfg = cfg or ModelConfig()
        self.head = Head(env, 1, self.cfg.action_blocks or 1, self.cfg)
        self.loss_trace: list[float] = []

    @property
    def horizon(self) -> int:
        return 1

    def fit(self, data: TransitionDataset, epochs=None, steps=None) -> list[float]:
        if data.count(1) == 0:
            raise ValueError("dataset has no one-step samples")
        trace = self.head.fit(data, epochs, steps)
        self.loss_trace += trace
        return trace

    def predict_batch(self, S, A):
        A = np.asarray(A, dtype=int).reshape(len(S), -1)
        if A.shape[1] != 1:
            raise ValueError("one-step model takes a single action")
        nxt, rew = self.head.predict(S, A)
        if self.cfg.reward_source == "oracle":
            rew = self.env.reward(S, A[:, 0], nxt)
        return nxt, rew

    def compose(self, S, A):
        """``(T1)^h`` chaining; returns final state and summed reward."""
        A = np.atleast_2d(np.asarray(A, dtype=int))
        s = np.asarray(S, dtype=float)
        total = np.zeros(len(s))
        for k in range(A.shape[1]):
            s, r = self.predict_batch(s, A[:, k:k + 1])
            total += r
        return s, total


class M3Model:
    """Multi-step model: heads ``T_h(s, a_1..a_h)`` for ``h = 1..H``."""

    kind = "m3"

    def __init__(self, env: Env, H: int, cfg: ModelConfig | None = None):
        if H < 1:
            raise ValueError("H must be >= 1")
        self.env, self.H = env, H
        self.cfg = cfg or ModelConfig()
        self.heads = [Head(env, h, H, self.cfg) for h in range(1, H + 1)]

    @property
    def horizon(self) -> int:
        return self.H

    def head(self, h: int) -> Head:
        if not 1 <= h <= self.H:
            raise ValueError(f"sequence length {h} outside [1, {self.H}]")
        return self.heads[h - 1]

    @property
    def untrained_heads(self) -> list[int]:
        return [hd.h for hd in self.heads if not hd.trained]

    def fit(self, data: TransitionDataset, epochs=None, steps=None) -> dict[int, list[float]]:
        if data.num_transitions == 0:
            raise ValueError("empty dataset")
        traces = {}
        for hd in self.heads:
            if data.count(hd.h) == 0:
                continue
            traces[hd.h] = hd.fit(data, epochs, steps)
        if self.untrained_heads:
            log.debug("heads without samples: %s", self.untrained_heads)
        return traces

    def predict_batch(self, S, A):
        A = np.asarray(A, dtype=int).reshape(len(S), -1)
        h = A.shape[1]
        nxt, rew = self.head(h).predict(S, A)
        if self.cfg.reward_source == "oracle":
            chain = [np.asarray(S, dtype=float)]
            for k in range(1, h + 1):
                chain.append(self.head(k).predict(S, A[:, :k])[0])
            rew = _oracle_cum_reward(self.env, chain, A)
        return nxt, rew

    def as_one_step(self) -> OneStepModel:
        """The h=1 head exposed as a one-step model (shares the networks)."""
        one = OneStepModel(self.env, replace(self.cfg, action_blocks=self.H))
        one.head = self.heads[0]
        return one


class HallucinatedModel(OneStepModel):
    """One-step model that also trains on inputs it generated itself.

    Each refresh rolls the current model forward along recorded action
    sequences for ``halluc_depth`` steps; every composed prediction
    ``s_hat_{t+k}`` becomes an input paired with the true ``a_{t+k}`` and the
    true ``s_{t+k+1}``.
    """

    kind = "hallucinated"

    def hallucinated_pairs(self, data: TransitionDataset):
        depth = self.cfg.halluc_depth
        S, A, T, R = [], [], [], []
        for ep in data.episodes:
            n = len(ep)
            if n < 2:
                continue
            s_hat = ep.states[:-1].copy()
            starts = np.arange(n - 1)
            for k in range(1, min(depth, n - 1) + 1):
                s_hat, _ = self.predict_batch(s_hat, ep.actions[starts + k - 1][:, None])
                idx = starts + k
                keep = idx < n
                s_hat, starts, idx = s_hat[keep], starts[keep], idx[keep]
                if len(idx) == 0:
                    break
                S.append(s_hat.copy())
                A.append(ep.actions[idx][:, None])
                T.append(ep.next_states[idx])
                R.append(ep.rewards[idx])
        if not S:
            return None
        return np.concatenate(S), np.concatenate(A), np.concatenate(T), np.concatenate(R)

    def fit(self, data: TransitionDataset, epochs=None, steps=None) -> list[float]:
        if self.cfg.halluc_depth <= 0:
            return super().fit(data, epochs, steps)
        if data.count(1) == 0:
            raise ValueError("dataset has no one-step samples")
        real = data.samples(1)
        fake = self.hallucinated_pairs(data) if self.head.trained else None
        if fake is None:
            trace = self.head.fit(data, epochs, steps)
        else:
            n_real = len(real)
            n_fake = len(fake[0])
            take = min(n_fake, int(round(self.cfg.halluc_ratio * n_real)))
            pick = self.head.train_rng.choice(n_fake, size=take, replace=False)
            S = np.concatenate([real.states, fake[0][pick]])
            A = np.concatenate([real.actions, fake[1][pick]])
            T = np.concatenate([real.targets, fake[2][pick]])
            R = np.concatenate([real.cum_rewards, fake[3][pick]])
            if steps is not None:
                steps = int(round(steps * len(S) / n_real))
            trace = self.head.train_arrays(S, A, T, R, epochs, steps)
        self.loss_trace += trace
        return trace


def train_one_step(data: TransitionDataset, env: Env, cfg: ModelConfig | None = None,
                   epochs=None) -> OneStepModel:
    model = OneStepModel(env, cfg)
    model.fit(data, epochs)
    return model


def train_multi_step(data: TransitionDataset, env: Env, H: int,
                     cfg: ModelConfig | None = None, epochs=None) -> M3Model:
    if H > data.H:
        raise ValueError(f"dataset indexes sequences up to {data.H}, asked for {H}")
    model = M3Model(env, H, cfg)
    model.fit(data, epochs)
    return model


def train_hallucinated(data: TransitionDataset, env: Env, cfg: ModelConfig | None = None,
                       epochs=None, rounds: int = 3) -> HallucinatedModel:
    """Plain fit, then ``rounds`` refits on real plus freshly hallucinated pairs."""
    model = HallucinatedModel(env, cfg)
    if model.cfg.halluc_depth <= 0:
        model.fit(data, epochs)
        return model
    per_round = max((model.cfg.epochs if epochs is None else epochs) // (rounds + 1), 1)
    for _ in range(rounds + 1):
        model.fit(data, per_round)
    return model


def predict(model, s, actions):
    """Single-sample prediction; dispatches on the sequence length."""
    A = np.asarray(list(actions), dtype=int)[None, :]
    if A.shape[1] > model.horizon:
        raise ValueError(f"sequence of length {A.shape[1]} exceeds model horizon {model.horizon}")
    nxt, rew = model.predict_batch(np.asarray(s, dtype=float)[None, :], A)
    return nxt[0], float(rew[0])


# ---------------------------------------------------------------------------
# exact gridworld models (oracles for tests and the bound harness)

class TabularGridModel:
    """Frozen-ghost gridworld dynamics with optional per-entry corruptions.

    ``kind="one-step"`` models ``T_1(s, a)``; ``kind="m3"`` models each
    ``T_h(s, a_1..a_h)`` directly. ``overrides`` maps ``(h, s_idx, actions)``
    to a replacement state index.
    """

    def __init__(self, grid: GridWorld, H: int = 1, kind: str = "one-step",
                 overrides: dict | None = None):
        if kind not in ("one-step", "m3"):
            raise ValueError(kind)
        self.env = grid
        self.kind = kind
        self.H = 1 if kind == "one-step" else H
        self.cfg = ModelConfig()
        self.overrides = dict(overrides or {})
        det = grid if grid.frozen_ghost else GridWorld(
            grid.n, grid.goal_reward, grid.capture_reward, grid.step_reward,
            grid.spec.horizon_cap, frozen_ghost=True, terminate=grid.terminate)
        self._det = det
        self.table = det.transition_table()
        A = grid.spec.num_actions
        self._codes = {}
        for (h, s_idx, acts), tgt in self.overrides.items():
            code = 0
            for a in acts:
                code = code * A + int(a)
            self._codes.setdefault(h, []).append((int(s_idx), code, int(tgt)))

    @property
    def horizon(self) -> int:
        return self.H

    def _apply(self, h, start_idx, codes, out_idx):
        for s_idx, code, tgt in self._codes.get(h, []):
            out_idx[(start_idx == s_idx) & (codes == code)] = tgt
        return out_idx

    def predict_index(self, s_idx: np.ndarray, A: np.ndarray) -> np.ndarray:
        A = np.atleast_2d(A)
        h = A.shape[1]
        if h > self.H:
            raise ValueError(f"sequence of length {h} exceeds model horizon {self.H}")
        nA = self.env.spec.num_actions
        cur = np.asarray(s_idx).copy()
        codes = np.zeros(len(cur), dtype=np.int64)
        for k in range(h):
            cur = self.table[cur, A[:, k]]
            codes = codes * nA + A[:, k]
        if self.kind == "one-step":
            return self._apply(1, np.asarray(s_idx), codes, cur)
        return self._apply(h, np.asarray(s_idx), codes, cur)

    def predict_batch(self, S, A):
        S = np.atleast_2d(np.asarray(S, dtype=float))
        A = np.asarray(A, dtype=int).reshape(len(S), -1)
        idx = self.env.index(S)
        h = A.shape[1]
        if self.kind == "one-step" and h != 1:
            raise ValueError("one-step model takes a single action")
        chain = [S]
        for k in range(1, h + 1):
            chain.append(self.env.decode(self.predict_index(idx, A[:, :k])))
        return chain[-1], _oracle_cum_reward(self._det, chain, A)

    def compose(self, S, A):
        A = np.atleast_2d(np.asarray(A, dtype=int))
        s = np.asarray(S, dtype=float)
        total = np.zeros(len(s))
        for k in range(A.shape[1]):
            s, r = self.predict_batch(s, A[:, k:k + 1])
            total += r
        return s, total


# ---------------------------------------------------------------------------
# EM stochastic multi-step model

class EMHead:
    """``M`` component networks for one horizon plus their mixing weights."""

    def __init__(self, env: Env, h: int, blocks: int, M: int, sigma: float, cfg: ModelConfig):
        if M < 1:
            raise ValueError("M must be >= 1")
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.env, self.h, self.blocks, self.M, self.sigma, self.cfg = env, h, blocks, M, sigma, cfg
        spec = env.spec
        sizes = [spec.state_dim + blocks * spec.num_actions, *cfg.hidden, spec.state_dim]
        self.components = [nn.Regressor(nn.init_network(sizes, _seed_of(cfg.seed, h, 10 + m)),
                                        nn.Adam(cfg.lr), "l2") for m in range(M)]
        self.weights = np.full(M, 1.0 / M)
        self.rng = _rng(cfg.seed, h, 9)
        self.fitted = False
        self.qll_trace: list[float] = []
        self.ll_trace: list[float] = []
        self.flags: list[str] = []

    def _inputs(self, S, A):
        spec = self.env.spec
        return np.hstack([np.asarray(S, dtype=float) / spec.scale,
                          h_hot(A, self.blocks, spec.num_actions)])

    def component_predictions(self, S, A) -> np.ndarray:
        """``(M, n, d)`` predicted next states, one slice per component."""
        X = self._inputs(S, A)
        S = np.asarray(S, dtype=float)
        scale = self.env.spec.scale
        return np.stack([self.env.clip(S + nn.forward(c.net, X) * scale)
                         for c in self.components])

    def log_likelihood(self, S, A, T) -> np.ndarray:
        """``(n, M)`` Gaussian log-densities of ``|s' - T_m(s, a)|`` with std ``sigma``."""
        P = self.component_predictions(S, A)
        d = T.shape[1]
        sq = ((P - T[None]) ** 2).sum(axis=2).T
        return -sq / (2 * self.sigma ** 2) - 0.5 * d * np.log(2 * np.pi * self.sigma ** 2)

    def posterior(self, S, A, T) -> np.ndarray:
        ll = self.log_likelihood(S, A, T)
        ll -= ll.max(axis=1, keepdims=True)
        q = np.exp(ll)
        return q / q.sum(axis=1, keepdims=True)

    def _initial_posterior(self, X, dY) -> np.ndarray:
        n = len(X)
        if self.M == 1:
            return np.ones((n, 1))
        # cluster residuals of a mean regressor so components start on distinct modes
        spec = self.env.spec
        mean = nn.Regressor(nn.init_network([X.shape[1], *self.cfg.hidden, spec.state_dim],
                                            _seed_of(self.cfg.seed, self.h, 99)),
                            nn.Adam(self.cfg.lr), "l2")
        mean.fit(X, dY, self.cfg.em_mstep_steps, self.cfg.batch_size, self.rng)
        resid = dY - nn.forward(mean.net, X)
        _, labels = kmeans2(resid, self.M, minit="++", seed=self.rng)
        q = np.full((n, self.M), 1e-3)
        q[np.arange(n), labels] = 1.0
        return q / q.sum(axis=1, keepdims=True)

    def fit(self, S, A, T, iters: int) -> np.ndarray:
        """Generalized EM; returns the final posterior ``(n, M)``."""
        if len(S) == 0:
            raise ValueError(f"no samples for horizon {self.h}")
        X = self._inputs(S, A)
        dY = (T - S) / self.env.spec.scale
        q = self._initial_posterior(X, dY)
        n = len(X)
        for _ in range(iters):
            for m, comp in enumerate(self.components):
                p = q[:, m] / q[:, m].sum()
                for _ in range(self.cfg.em_mstep_steps):
                    idx = self.rng.choice(n, size=min(self.cfg.batch_size, n), p=p)
                    _, grads = nn.backward(comp.net, X[idx], dY[idx], "l2")
                    comp.opt.step(comp.net, grads)
            self.weights = q.sum(axis=0) / q.sum()
            ll = self.log_likelihood(S, A, T)
            qll = float((q * ll).sum())
            if self.qll_trace and qll < self.qll_trace[-1] - 0.01 * abs(self.qll_trace[-1]):
                self.flags.append(f"q-weighted log-likelihood fell at iteration "
                                  f"{len(self.qll_trace)}: {self.qll_trace[-1]:.4g} -> {qll:.4g}")
                log.warning(self.flags[-1])
            self.qll_trace.append(qll)
            top = ll.max(axis=1, keepdims=True)
            self.ll_trace.append(float((top[:, 0] + np.log(np.exp(ll - top).mean(axis=1))).sum()))
            q = self.posterior(S, A, T)
        self.fitted = True
        return q

    def sample(self, S, A, rng: np.random.Generator) -> np.ndarray:
        if not self.fitted:
            raise ValueError(f"EM head h={self.h} is not fitted")
        P = self.component_predictions(S, A)
        m = rng.choice(self.M, size=P.shape[1], p=self.weights)
        return P[m, np.arange(P.shape[1])]


class EMModel:
    kind = "em"

    def __init__(self, env: Env, H: int, cfg: ModelConfig | None = None,
                 M: int | None = None, sigma: float | None = None):
        self.env, self.H = env, H
        self.cfg = cfg or ModelConfig()
        self.M = self.cfg.em_components if M is None else M
        self.sigma = self.cfg.em_sigma if sigma is None else sigma
        self.heads: dict[int, EMHead] = {}

    @property
    def horizon(self) -> int:
        return self.H

    def fit(self, data: TransitionDataset, iters: int | None = None) -> None:
        for h in range(1, self.H + 1):
            self.heads[h] = em_fit(data, self.env, h, self.M, self.cfg.em_iters
                                   if iters is None else iters, self.sigma, self.cfg, self.H)

    def sample_batch(self, S, A, rng) -> np.ndarray:
        A = np.asarray(A, dtype=int).reshape(len(S), -1)
        h = A.shape[1]
        if h not in self.heads:
            raise ValueError(f"EM head h={h} is not fitted")
        return self.heads[h].sample(S, A, rng)

    def predict_batch(self, S, A, rng=None):
        """One draw per row plus the oracle reward of reaching it."""
        rng = rng if rng is not None else np.random.default_rng(0)
        A = np.asarray(A, dtype=int).reshape(len(S), -1)
        nxt = self.sample_batch(S, A, rng)
        return nxt, self.env.reward(S, A[:, -1], nxt)


def em_fit(data: TransitionDataset, env: Env, h: int, M: int, iters: int, sigma: float,
           cfg: ModelConfig | None = None, blocks: int | None = None) -> EMHead:
    cfg = cfg or ModelConfig()
    head = EMHead(env, h, blocks or data.H, M, sigma, cfg)
    smp = data.samples(h)
    head.fit(smp.states, smp.actions, smp.targets, iters)
    return head


def em_sample(em: EMModel, s, actions, rng) -> np.ndarray:
    A = np.asarray(list(actions), dtype=int)[None, :]
    return em.sample_batch(np.asarray(s, dtype=float)[None, :], A, rng)[0]


# ---------------------------------------------------------------------------
# persistence

def save_model(model, path) -> None:
    """Manifest (kind, H, M, sigma, normalization) with embedded snapshots."""
    env = model.env
    doc = {"kind": model.kind, "env": env.spec.name, "H": model.horizon,
           "scale": env.spec.scale.tolist(), "config": asdict(model.cfg)}
    if isinstance(model, M3Model):
        doc["heads"] = [hd.to_dict() for hd in model.heads]
    elif isinstance(model, OneStepModel):
        doc["heads"] = [model.head.to_dict()]
    elif isinstance(model, EMModel):
        doc.update(M=model.M, sigma=model.sigma, heads=[
            {"h": h, "weights": hd.weights.tolist(),
             "components": [nn.to_snapshot(c.net) for c in hd.components]}
            for h, hd in sorted(model.heads.items())])
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    Path(path).write_text(json.dumps(doc))


def load_model(path, env: Env | None = None):
    doc = json.loads(Path(path).read_text())
    env = env or make_env(doc["env"])
    if not np.array_equal(np.asarray(doc["scale"]), env.spec.scale):
        raise ValueError("normalization constants do not match the environment")
    cfg_d = doc["config"]
    cfg_d["hidden"] = tuple(cfg_d["hidden"])
    cfg = ModelConfig(**cfg_d)
    kind = doc["kind"]
    if kind == "m3":
        model = M3Model(env, doc["H"], cfg)
        for hd, d in zip(model.heads, doc["heads"]):
            hd.load_dict(d)
    elif kind in ("one-step", "hallucinated"):
        model = (HallucinatedModel if kind == "hallucinated" else OneStepModel)(env, cfg)
        model.head.load_dict(doc["heads"][0])
    elif kind == "em":
        model = EMModel(env, doc["H"], cfg, doc["M"], doc["sigma"])
        for d in doc["heads"]:
            hd = EMHead(env, d["h"], doc["H"], doc["M"], doc["sigma"], cfg)
            for c, snap in zip(hd.components, d["components"]):
                c.net = nn.from_snapshot(snap)
            hd.weights = np.asarray(d["weights"])
            hd.fitted = True
            model.heads[d["h"]] = hd
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return model
