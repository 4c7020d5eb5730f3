"""Decision-time planning: look-ahead trees over learned models, and DQN around them.

States are indexed from the current one, ``s_1``. A tree of horizon ``H``
holds predicted states ``s_hat_2 .. s_hat_H`` and action edges at every
level ``1..H``. With ``full`` expansion every state expands every action;
with ``greedy`` expansion the root expands every action and deeper states
expand only ``argmax_a Q(s_hat, a)``.

An edge ``(s_hat_h, a)`` is worth the reward predicted so far plus
``Q(s_hat_h, a)``; on greedy edges that is ``max_a Q`` at the state, so the
last edge bootstraps the leaf with ``max_a Q(s_hat_H, a)``. A root action is
valued by its deepest edge (``leaf-sum``) or by the mean of the ``H`` edge
estimates along its rollout (``ensemble``). With ``H = 1`` both reduce to
``Q(s_1, a)``.

For a multi-step model every state is ``T_h(s_1, prefix)``; other models
chain predictions from the parent state.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .agents import CriticNet, ReplayBuffer, TabularQ, dqn_update, make_model, sync_target
from .envs import Env, Episode, GridWorld, run_episode
from .models import EMModel, ModelConfig, TransitionDataset

log = logging.getLogger(__name__)

EXPANSIONS = ("full", "greedy")
VALUATIONS = ("leaf-sum", "ensemble")
SNAPSHOT_FIELDS = ["snapshot_index", "strategy", "valuation", "model_kind", "mean_gain", "stderr"]


@dataclass
class PlanConfig:
    H: int = 2
    expansion: str = "greedy"
    valuation: str = "ensemble"
    model_kind: str = "m3"
    em_samples: int = 4
    terminal_from_env: bool = True

    def __post_init__(self):
        if self.H < 1:
            raise ValueError("planning horizon must be >= 1")
        if self.expansion not in EXPANSIONS:
            raise ValueError(f"expansion must be one of {EXPANSIONS}")
        if self.valuation not in VALUATIONS:
            raise ValueError(f"valuation must be one of {VALUATIONS}")
        if self.em_samples < 1:
            raise ValueError("em_samples must be >= 1")


@dataclass
class PlanNode:
    """A (predicted) state in the tree; ``edges`` holds the expanded actions' estimates."""

    state: np.ndarray
    depth: int = 0
    reward: float = 0.0
    prefix: tuple[int, ...] = ()
    done: bool = False
    edges: dict[int, float] = field(default_factory=dict)
    children: dict[int, "PlanNode"] = field(default_factory=dict)

    def walk(self):
        yield self
        for a in sorted(self.children):
            yield from self.children[a].walk()

    def count(self) -> int:
        """Action edges expanded in this subtree (the tree's node count)."""
        return sum(len(n.edges) for n in self.walk())


def _terminal(env: Env, S, prev) -> np.ndarray:
    if isinstance(env, GridWorld):
        return env.is_terminal(S, prev)
    return env.is_terminal(S)


def node_estimate(node: PlanNode, q) -> float:
    """Accumulated reward plus ``max_a Q`` at the node (no bootstrap past a terminal)."""
    if node.done:
        return float(node.reward)
    return float(node.reward + q.values(node.state[None, :])[0].max())


def _edge_estimates(node: PlanNode, q, actions) -> None:
    if node.done:
        node.edges.update({a: float(node.reward) for a in actions})
        return
    qv = q.values(node.state[None, :])[0]
    node.edges.update({a: float(node.reward + qv[a]) for a in actions})


def _expand(model, root: PlanNode, parents: list[PlanNode], acts: list[int],
            cfg: PlanConfig, rng) -> list[PlanNode]:
    """Child states of ``parents[i]`` under ``acts[i]``, computed in one batch."""
    env = model.env
    P = np.array([p.state for p in parents])
    A = np.asarray(acts, dtype=int)
    prefixes = np.array([p.prefix + (a,) for p, a in zip(parents, acts)], dtype=int)
    h = prefixes.shape[1]
    if model.kind == "em":
        S1 = np.repeat(root.state[None, :], len(parents), axis=0)
        nxt = model.sample_batch(S1, prefixes, rng)
        rew = np.array([p.reward for p in parents]) + env.reward(P, A, nxt)
    elif model.kind == "m3":
        S1 = np.repeat(root.state[None, :], len(parents), axis=0)
        nxt, rew = model.predict_batch(S1, prefixes)
    else:
        nxt, r = model.predict_batch(P, A[:, None])
        rew = np.array([p.reward for p in parents]) + r
    done = (_terminal(env, nxt, P) if cfg.terminal_from_env
            else np.zeros(len(parents), dtype=bool))
    out = []
    for i, p in enumerate(parents):
        if p.done:  # absorbing: keep the parent's state and reward
            child = PlanNode(p.state, h, p.reward, tuple(prefixes[i]), True)
        else:
            child = PlanNode(nxt[i], h, float(rew[i]), tuple(prefixes[i]), bool(done[i]))
        p.children[int(A[i])] = child
        out.append(child)
    return out


def build_tree(s, model, q, cfg: PlanConfig, rng=None) -> PlanNode:
    """Expand a look-ahead tree of horizon ``cfg.H`` from ``s``."""
    if model is not None and model.kind == "m3" and cfg.H - 1 > model.horizon:
        raise ValueError(f"planning horizon {cfg.H} needs {cfg.H - 1} model steps; "
                         f"model horizon is {model.horizon}")
    if model is not None and model.kind == "em" and rng is None:
        raise ValueError("EM-backed trees need an rng")
    if model is None and cfg.H > 1:
        raise ValueError("planning beyond H=1 needs a model")
    s = np.asarray(s, dtype=float)
    nA = len(q.values(s[None, :])[0])
    root = PlanNode(s)
    frontier = [root]
    for depth in range(1, cfg.H + 1):
        parents, acts = [], []
        for node in frontier:
            if cfg.expansion == "full" or depth == 1:
                choices = list(range(nA))
            else:
                choices = [int(np.argmax(q.values(node.state[None, :])[0]))]
            _edge_estimates(node, q, choices)
            parents += [node] * len(choices)
            acts += choices
        if depth < cfg.H:
            frontier = _expand(model, root, parents, acts, cfg, rng)
    return root


def _rollout_estimates(root: PlanNode, a: int, q) -> list[float]:
    """Edge estimates along the rollout that starts with ``a`` and then follows max-Q."""
    out = [root.edges[a]]
    node = root.children.get(a)
    while node is not None and node.edges:
        if len(node.edges) == 1:
            b = next(iter(node.edges))
        else:
            b = int(np.argmax(q.values(node.state[None, :])[0]))
        out.append(node.edges[b])
        node = node.children.get(b)
    return out


def _deepest(node: PlanNode, a: int) -> list[float]:
    child = node.children.get(a)
    if child is None:
        return [node.edges[a]]
    vals = []
    for b in child.edges:
        vals += _deepest(child, b)
    return vals


def action_value(root: PlanNode, a: int, cfg: PlanConfig, q=None) -> float:
    """``leaf-sum``: best deepest-edge estimate under ``a``; ``ensemble``: rollout mean.

    ``q`` is only consulted to pick the max-Q rollout under full expansion.
    """
    if a not in root.edges:
        raise ValueError(f"action {a} was not expanded at the root")
    if cfg.valuation == "ensemble":
        if q is None and cfg.expansion == "full" and cfg.H > 1:
            raise ValueError("ensemble valuation of a full tree needs q")
        return float(np.mean(_rollout_estimates(root, a, q)))
    return float(max(_deepest(root, a)))


def plan_values(s, model, q, cfg: PlanConfig, rng=None) -> np.ndarray:
    trees = cfg.em_samples if model is not None and model.kind == "em" and cfg.H > 1 else 1
    total = None
    for _ in range(trees):
        root = build_tree(s, model, q, cfg, rng)
        vals = np.array([action_value(root, a, cfg, q) for a in sorted(root.edges)])
        total = vals if total is None else total + vals
    return total / trees


def plan_action(s, model, q, cfg: PlanConfig, rng=None) -> int:
    """Best root action; ``np.argmax`` breaks ties toward the lowest index."""
    if model is None:
        return int(np.argmax(q.values(np.asarray(s, dtype=float)[None, :])[0]))
    return int(np.argmax(plan_values(s, model, q, cfg, rng)))


# ---------------------------------------------------------------------------
# DQN with optional planned action selection

@dataclass
class DQNConfig:
    q_kind: str = "net"            # net | tabular (gridworld only)
    hidden: tuple[int, ...] = (64,)
    lr: float = 1e-3
    gamma: float = 0.99
    alpha: float = 0.5             # tabular step size
    q_init: float = 0.0
    batch_size: int = 32
    replay_capacity: int = 10000
    warmup: int = 64
    target_sync: int = 100         # in gradient updates
    value_scale: float = 10.0
    epsilon: float = 0.01
    model_steps: int = 40
    train_model: bool = True
    snapshot_every: int = 100
    plan: PlanConfig = field(default_factory=PlanConfig)
    model: ModelConfig = field(default_factory=ModelConfig)


@dataclass
class DQNRun:
    returns: list[float]
    lengths: list[int]
    wall_ms: list[float]
    model_kind: str
    seed: int
    snapshots: list[tuple[int, object, dict]] = field(default_factory=list)

    @property
    def auc(self) -> float:
        return float(np.mean(self.returns))


def make_q(env: Env, cfg: DQNConfig, seed: int):
    if cfg.q_kind == "tabular":
        if not isinstance(env, GridWorld):
            raise ValueError("tabular Q needs the gridworld")
        return TabularQ(env, cfg.q_init)
    if cfg.q_kind != "net":
        raise ValueError(f"unknown q_kind {cfg.q_kind!r}")
    spec = env.spec
    return CriticNet(spec.state_dim, spec.num_actions, spec.scale, cfg.hidden,
                     seed=int(np.random.default_rng([seed, 3]).integers(2 ** 63)),
                     lr=cfg.lr, value_scale=cfg.value_scale)


def _snapshot_q(q):
    if isinstance(q, TabularQ):
        out = TabularQ(q.grid)
        out.table = q.table.copy()
        return out
    return q.copy()


def run_model_based_dqn(env: Env, model_kind: str, cfg: DQNConfig | None, episodes: int,
                        seed: int, model=None, record_models=()) -> DQNRun:
    """DQN whose behavior actions come from :func:`plan_action` (``none`` = plain DQN).

    ``model`` may be supplied pre-trained (then it is only refreshed when
    ``cfg.train_model``). ``record_models`` lists extra model kinds trained
    online on the same data purely so snapshots can carry them.
    """
    cfg = cfg or DQNConfig()
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng([seed, 0])
    plan_rng = np.random.default_rng([seed, 4])
    q = make_q(env, cfg, seed)
    target = _snapshot_q(q)
    mcfg = ModelConfig(**{**cfg.model.__dict__, "seed": seed})
    H = max(cfg.plan.H - 1, 1)  # model steps inside a horizon-H tree
    if model is None and model_kind != "none":
        model = make_model(model_kind, env, H, mcfg)
    side = {k: make_model(k, env, H, mcfg) for k in record_models}
    trainable = [m for m in ([model] if model is not None and cfg.train_model else [])
                 if not isinstance(m, EMModel)] + list(side.values())
    data = TransitionDataset([], H)
    replay = None
    if cfg.q_kind == "net":
        replay = ReplayBuffer(cfg.replay_capacity, env.spec.state_dim)
    updates = 0
    run = DQNRun([], [], [], model_kind, seed)
    for ep_i in range(episodes):
        t0 = time.perf_counter()
        # a model trained online is first consulted once it has seen data
        use_model = model is not None and (data.num_transitions > 0
                                           or not any(m is model for m in trainable))

        def act(s, rng_):
            if rng_.random() < cfg.epsilon:
                return int(rng_.integers(env.spec.num_actions))
            if use_model:
                return plan_action(s, model, q, cfg.plan, plan_rng)
            return int(np.argmax(q.values(s[None, :])[0]))

        s = env.reset(int(rng.integers(2 ** 63)))
        states, actions, rewards, nexts, dones = [], [], [], [], []
        done = False
        while len(actions) < env.spec.horizon_cap and not done:
            a = act(s, rng)
            s2, r, done = env.step(s, a, rng)
            states.append(s), actions.append(a), rewards.append(r)
            nexts.append(s2), dones.append(done)
            if replay is None:
                q.q_learning(s, a, r, s2, done, cfg.alpha, cfg.gamma)
            else:
                replay.add(s, a, r, s2, done)
                if len(replay) >= max(cfg.warmup, cfg.batch_size):
                    dqn_update(q, target, replay, cfg.batch_size, cfg.gamma, rng)
                    updates += 1
                    if updates % cfg.target_sync == 0:
                        sync_target(q, target)
            s = s2
        ep = Episode(np.array(states), np.array(actions, dtype=int), np.array(rewards),
                     np.array(nexts), np.array(dones, dtype=bool), truncated=not done)
        data.add(ep)
        for m in trainable:
            m.fit(data, steps=cfg.model_steps)
        run.returns.append(ep.total_return)
        run.lengths.append(len(ep))
        run.wall_ms.append((time.perf_counter() - t0) * 1e3)
        if cfg.snapshot_every and (ep_i + 1) % cfg.snapshot_every == 0:
            models = {k: copy.deepcopy(m) for k, m in side.items()}
            if model is not None:
                models.setdefault(model_kind, copy.deepcopy(model))
            run.snapshots.append((ep_i + 1, _snapshot_q(q), models))
    return run


# ---------------------------------------------------------------------------
# snapshot protocol

def evaluate_policy(env: Env, act, episodes: int, seed: int) -> np.ndarray:
    """Returns of ``episodes`` evaluation episodes (no learning)."""
    out = []
    for i in range(episodes):
        rng = np.random.default_rng([seed, i])
        out.append(run_episode(env, act, rng).total_return)
    return np.asarray(out)


def snapshot_evaluation(env: Env, snapshots: list, models_per_snapshot: list, cfg: PlanConfig,
                        episodes_per_point: int = 20, seed: int = 0,
                        epsilon: float = 0.0) -> list[dict]:
    """Gain of planned over model-free greedy action selection at each snapshot.

    Both arms replay the same episode seeds, so the gain is a paired difference.
    """
    if not snapshots:
        raise ValueError("no snapshots")
    if len(snapshots) != len(models_per_snapshot):
        raise ValueError("need exactly one model per snapshot")
    rows = []
    for i, (q, model) in enumerate(zip(snapshots, models_per_snapshot)):
        plan_rng = np.random.default_rng([seed, i, 1])

        def free(s, rng, q=q):
            if rng.random() < epsilon:
                return int(rng.integers(env.spec.num_actions))
            return int(np.argmax(q.values(s[None, :])[0]))

        def planned(s, rng, q=q, model=model):
            if rng.random() < epsilon:
                return int(rng.integers(env.spec.num_actions))
            return plan_action(s, model, q, cfg, plan_rng)

        base = evaluate_policy(env, free, episodes_per_point, seed)
        mb = evaluate_policy(env, planned, episodes_per_point, seed)
        diff = mb - base
        se = float(diff.std(ddof=1) / np.sqrt(len(diff))) if len(diff) > 1 else 0.0
        rows.append({"snapshot_index": i, "strategy": cfg.expansion, "valuation": cfg.valuation,
                     "model_kind": getattr(model, "kind", "none"),
                     "mean_gain": float(diff.mean()), "stderr": se})
    return rows


def snapshot_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, SNAPSHOT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
