"""Model diagnostics: h-step prediction error, exact small-MDP values, value-error bounds.

The bound checks work on the frozen-ghost gridworld, where every quantity
can be enumerated: the true value ``V_H``, the value ``V_hat_H`` under a
one-step model (composed) or a multi-step model (fixed origin), and the
model-error terms on the right-hand side of each bound.

Expectations use the state distribution of the true chain at each step,
started from ``start`` (uniform over all states by default; for the
frozen-ghost grid under a state-independent policy that law is stationary,
so every step has the same distribution).
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from .envs import Env, Episode, GridWorld, run_episode
from .models import TabularGridModel, TransitionDataset
from .rollout import ensemble_predict_batch

# ---------------------------------------------------------------------------
# h-step prediction error


@dataclass
class HStepErrorReport:
    model_kind: str
    errors: np.ndarray   # (H,) mean L1 error per h; nan where no window fits
    counts: np.ndarray   # (H,) number of h-windows

    @property
    def H(self) -> int:
        return len(self.errors)


def predict_h(model, S, A) -> np.ndarray:
    """``T_h`` for a multi-step model within its horizon, ``(T_1)^h`` otherwise."""
    h = A.shape[1]
    if model.kind == "m3" and h <= model.horizon:
        return model.predict_batch(S, A)[0]
    if model.kind == "m3":
        raise ValueError(f"h={h} exceeds model horizon {model.horizon}")
    s = np.asarray(S, dtype=float)
    for k in range(h):
        s, _ = model.predict_batch(s, A[:, k:k + 1])
    return s


def h_step_error(model, episode: Episode, H: int, normalized: bool = True) -> HStepErrorReport:
    """Mean L1 distance between ``h``-step predictions and the states observed ``h`` later."""
    if H < 1:
        raise ValueError("H must be >= 1")
    if len(episode) < 1:
        raise ValueError("empty episode")
    scale = model.env.spec.scale if normalized else 1.0
    T = len(episode)
    realized = np.vstack([episode.states, episode.next_states[-1:]])
    errors = np.full(H, np.nan)
    counts = np.zeros(H, dtype=int)
    for h in range(1, H + 1):
        n = T - h + 1
        if n <= 0:
            continue
        starts = np.arange(n)
        A = episode.actions[starts[:, None] + np.arange(h)]
        pred = predict_h(model, episode.states[starts], A)
        errors[h - 1] = float(np.abs((pred - realized[starts + h]) / scale).sum(axis=1).mean())
        counts[h - 1] = n
    return HStepErrorReport(model.kind, errors, counts)


def online_model_errors(env: Env, models: dict, episodes: int, H: int, rng,
                        act=None, model_steps: int = 200, eval_from: int = 1) -> dict:
    """Figure-8 style protocol: score each new episode before training on it.

    Returns ``{name: (episodes, H) array}`` of per-episode mean h-step errors
    (rows before ``eval_from`` stay nan).
    """
    from .envs import random_policy
    act = act or random_policy(env.spec.num_actions)
    horizon = max((m.horizon for m in models.values()), default=1)
    data = TransitionDataset([], max(horizon, 1))
    out = {k: np.full((episodes, H), np.nan) for k in models}
    for i in range(episodes):
        ep = run_episode(env, act, rng)
        if i >= eval_from:
            for k, m in models.items():
                out[k][i] = h_step_error(m, ep, H).errors
        data.add(ep)
        for m in models.values():
            m.fit(data, steps=model_steps)
    return out


def ensemble_errors(model, episodes, H: int, path_counts, rng, normalized: bool = True,
                    max_windows: int | None = None) -> dict:
    """Mean H-step L1 error of the path ensemble per ``num_paths``, plus both extremes.

    Keys: each entry of ``path_counts``, ``"direct"`` (``T_H`` alone) and
    ``"composed"`` (``(T_1)^H``).
    """
    S, A, Y = [], [], []
    for ep in episodes:
        n = len(ep) - H + 1
        if n <= 0:
            continue
        starts = np.arange(n)
        realized = np.vstack([ep.states, ep.next_states[-1:]])
        S.append(ep.states[starts])
        A.append(ep.actions[starts[:, None] + np.arange(H)])
        Y.append(realized[starts + H])
    if not S:
        raise ValueError(f"no episode has {H} steps")
    S, A, Y = np.concatenate(S), np.concatenate(A), np.concatenate(Y)
    if max_windows is not None and len(S) > max_windows:
        pick = rng.choice(len(S), size=max_windows, replace=False)
        S, A, Y = S[pick], A[pick], Y[pick]
    scale = model.env.spec.scale if normalized else 1.0

    def err(P):
        return float(np.abs((P - Y) / scale).sum(axis=1).mean())

    out = {"direct": err(model.predict_batch(S, A)[0]),
           "composed": err(ensemble_predict_batch(model, S, A, 1, rng, paths=[(1,) * H]))}
    for k in path_counts:
        out[k] = err(ensemble_predict_batch(model, S, A, k, rng))
    return out


# ---------------------------------------------------------------------------
# exact evaluation on enumerable MDPs


@dataclass
class TabularMDP:
    """``P[s, a, s']`` transition law, ``R[s, a]`` reward, ``done[s, a, s']`` terminal flags."""

    P: np.ndarray
    R: np.ndarray
    done: np.ndarray | None = None

    @property
    def num_states(self) -> int:
        return self.P.shape[0]

    @property
    def num_actions(self) -> int:
        return self.P.shape[1]


def tabulate(grid: GridWorld) -> TabularMDP:
    """Exact tables of the gridworld; ``R[s, a]`` is the expected reward."""
    S = grid.all_states()
    nS, nA = len(S), grid.spec.num_actions
    P = np.zeros((nS, nA, nS))
    R = np.zeros((nS, nA))
    D = np.zeros((nS, nA, nS), dtype=bool)
    if grid.frozen_ghost:
        T = grid.transition_table()
        rows = np.arange(nS)
        for a in range(nA):
            P[rows, a, T[:, a]] = 1.0
            D[rows, a, T[:, a]] = grid.is_terminal(S[T[:, a]], prev=S)
        return TabularMDP(P, grid.reward_table(), D)
    for i, s in enumerate(S):
        for a in range(nA):
            for s2, p in grid.enumerate_transitions(s, a):
                j = grid.index(s2)[0]
                P[i, a, j] += p
                R[i, a] += p * grid.reward(s[None, :], [a], s2[None, :])[0]
                D[i, a, j] = grid.is_terminal(s2[None, :], prev=s[None, :])[0]
    return TabularMDP(P, R, D)


def policy_table(policy, states: np.ndarray) -> np.ndarray:
    if isinstance(policy, np.ndarray):
        return policy
    return np.asarray(policy.probs(states), dtype=float)


@dataclass
class ExactValue:
    values: np.ndarray      # V_H over all states
    per_step: np.ndarray    # (H+1, nS): V_0 .. V_H
    state_dist: np.ndarray  # (H, nS): law of s_1 .. s_H under the true chain
    start: np.ndarray

    @property
    def visitation(self) -> np.ndarray:
        """Mean of the per-step laws: the empirical visitation distribution over the horizon."""
        if len(self.state_dist) == 0:
            return self.start.copy()
        return self.state_dist.mean(axis=0)


def exact_value(mdp, policy, H: int, start=None) -> ExactValue:
    """Finite-horizon policy evaluation ``V_H(s) = E[sum_{i=1}^H R(s_i, a_i)]`` by DP."""
    if H < 0:
        raise ValueError("H must be >= 0")
    if isinstance(mdp, GridWorld):
        states = mdp.all_states()
        mdp = tabulate(mdp)
    elif isinstance(mdp, TabularMDP):
        states = np.arange(mdp.num_states)[:, None].astype(float)
    else:
        raise TypeError("exact values need an enumerable MDP (gridworld or TabularMDP)")
    pi = policy_table(policy, states)
    nS = mdp.num_states
    cont = mdp.P if mdp.done is None else mdp.P * ~mdp.done
    V = np.zeros((H + 1, nS))
    for h in range(1, H + 1):
        V[h] = (pi * (mdp.R + cont @ V[h - 1])).sum(axis=1)
    d0 = np.full(nS, 1.0 / nS) if start is None else np.asarray(start, dtype=float)
    dists = np.zeros((H, nS))
    d = d0
    for h in range(H):
        dists[h] = d
        d = np.einsum("s,sa,sat->t", d, pi, mdp.P)
    return ExactValue(V[H], V, dists, d0)


def lipschitz_reward_constant(grid: GridWorld, reward=None) -> float:
    """``max_a max_{s != s'} |R(s,a) - R(s',a)| / d(s, s')`` with L1 distance in cell units."""
    S = grid.all_states()
    R = grid.reward_table() if reward is None else np.asarray(reward, dtype=float)
    best = 0.0
    for i in range(len(S) - 1):
        d = np.abs(S[i + 1:] - S[i]).sum(axis=1)
        diff = np.abs(R[i + 1:] - R[i]).max(axis=1)
        best = max(best, float((diff / d).max()))
    return best


# ---------------------------------------------------------------------------
# model tables and value under a model

def _require_deterministic(grid: GridWorld):
    if not isinstance(grid, GridWorld):
        raise TypeError("bound checks need the gridworld")
    if not grid.frozen_ghost:
        raise ValueError("bound checks need deterministic dynamics (frozen ghost)")


def _to_index(grid: GridWorld, S) -> np.ndarray:
    if not np.all(grid.on_grid(S)):
        raise ValueError("model predicted a state off the grid; bounds need an enumerable model")
    return grid.index(S)


def one_step_table(grid: GridWorld, model) -> np.ndarray:
    """``T_hat[s, a]`` as state indices."""
    S = grid.all_states()
    nA = grid.spec.num_actions
    out = np.empty((len(S), nA), dtype=int)
    for a in range(nA):
        out[:, a] = _to_index(grid, model.predict_batch(S, np.full((len(S), 1), a))[0])
    return out


def sequences(nA: int, h: int) -> np.ndarray:
    return np.array(list(itertools.product(range(nA), repeat=h)), dtype=int).reshape(-1, h)


def head_table(grid: GridWorld, model, h: int) -> np.ndarray:
    """``T_hat_h[s, code]`` with ``code`` the base-|A| number of the sequence."""
    S = grid.all_states()
    seqs = sequences(grid.spec.num_actions, h)
    nS, nq = len(S), len(seqs)
    Srep = np.repeat(S, nq, axis=0)
    Arep = np.tile(seqs, (nS, 1))
    return _to_index(grid, model.predict_batch(Srep, Arep)[0]).reshape(nS, nq)


def true_head_table(grid: GridWorld, h: int) -> np.ndarray:
    T = grid.transition_table()
    nA = grid.spec.num_actions
    cur = np.arange(grid.num_states)[:, None]
    for _ in range(h):
        cur = T[cur, :].reshape(grid.num_states, -1)
    assert cur.shape[1] == nA ** h
    return cur


def composed_value(grid: GridWorld, T1: np.ndarray, pi: np.ndarray, H: int) -> np.ndarray:
    """``V_hat_H`` when the one-step table ``T1`` is composed; reward is the true ``R``."""
    R = grid.reward_table()
    V = np.zeros(grid.num_states)
    for _ in range(H):
        V = (pi * (R + V[T1])).sum(axis=1)
    return V


def fixed_origin_value(grid: GridWorld, heads: list[np.ndarray], pi: np.ndarray, H: int):
    """``V_hat_H(s_1)`` for a multi-step model with head tables ``heads[h-1]``.

    Returns the values and, per step ``h``, the probability of every prefix
    (the product formula with the policy queried at predicted states).
    """
    R = grid.reward_table()
    nS, nA = grid.num_states, grid.spec.num_actions
    states = np.arange(nS)[:, None]            # s_hat_1 for every prefix (only the empty one)
    prob = np.ones((nS, 1))
    V = np.zeros(nS)
    probs = []
    for h in range(1, H + 1):
        # s_hat_h for each prefix of length h-1: states (nS, nA^(h-1))
        step = pi[states] * prob[:, :, None]     # (nS, nA^(h-1), nA)
        V += (step * R[states]).sum(axis=(1, 2))
        prob = step.reshape(nS, -1)
        probs.append(prob)
        if h < H:
            states = heads[h - 1]
    return V, probs


# ---------------------------------------------------------------------------
# bound reports


@dataclass
class BoundReport:
    theorem: int
    H: int
    lhs: float
    rhs: float
    errors: np.ndarray          # per-h model error E||T - T_hat||, h = 1..H-1
    weights: np.ndarray         # (H - h) for theorem 1, ones for theorem 2
    lip_R: float
    flags: dict = field(default_factory=dict)
    note: str = ("expectations over the true chain's per-step state law from a uniform start "
                 "(stationary for the frozen-ghost grid under a state-independent policy)")

    @property
    def holds(self) -> bool:
        return bool(self.lhs <= self.rhs + 1e-9)

    @property
    def terms(self) -> np.ndarray:
        return self.lip_R * self.weights * self.errors

    def rows(self, trial=0) -> list[list]:
        out = []
        for h, (e, w, t) in enumerate(zip(self.errors, self.weights, self.terms), start=1):
            out.append([trial, self.theorem, self.H, h, repr(float(e)), repr(float(w)),
                        repr(float(t)), repr(self.lhs), repr(self.rhs), int(self.holds)])
        if not out:
            out.append([trial, self.theorem, self.H, 0, "0.0", "0.0", "0.0",
                        repr(self.lhs), repr(self.rhs), int(self.holds)])
        return out


BOUND_FIELDS = ["trial", "theorem", "H", "h", "error_h", "weight_h", "term_h", "lhs", "rhs",
                "holds"]


def bound_csv(reports, trials=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BOUND_FIELDS)
    for i, r in enumerate(reports):
        w.writerows(r.rows(i if trials is None else trials[i]))
    return buf.getvalue()


def _l1(grid: GridWorld, idx_a: np.ndarray, idx_b: np.ndarray) -> np.ndarray:
    S = grid.all_states()
    return np.abs(S[idx_a] - S[idx_b]).sum(axis=-1)


def _state_dependent(pi: np.ndarray) -> bool:
    return bool(np.abs(pi - pi[0]).max() > 1e-12)


def _expansion(grid: GridWorld, T1: np.ndarray) -> float:
    """Largest ratio ``d(T(s,a), T(s',a)) / d(s, s')`` over neighbouring state pairs."""
    S = grid.all_states()
    worst = 0.0
    for j in range(4):
        other = S.copy()
        other[:, j] += 1
        ok = other[:, j] < grid.n
        i1 = np.arange(len(S))[ok]
        i2 = grid.index(other[ok])
        worst = max(worst, float(_l1(grid, T1[i1], T1[i2]).max()))
    return worst


def check_theorem1(grid: GridWorld, model, policy, H: int, lip_R: float | None = None,
                   start=None) -> BoundReport:
    """One-step bound: ``Lip(R) sum_{h<H} (H-h) E||T_1(s_h,a_h) - T_hat_1(s_h,a_h)||``."""
    _require_deterministic(grid)
    if H < 1:
        raise ValueError("H must be >= 1")
    lip_R = lipschitz_reward_constant(grid) if lip_R is None else lip_R
    pi = policy_table(policy, grid.all_states())
    T = grid.transition_table()
    T1 = model if isinstance(model, np.ndarray) else one_step_table(grid, model)
    ev = exact_value(grid, pi, H, start)
    lhs = abs(float(ev.start @ (ev.values - composed_value(grid, T1, pi, H))))
    err_sa = _l1(grid, T, T1)                              # (nS, nA)
    errors = np.array([float((ev.state_dist[h - 1] @ (pi * err_sa)).sum())
                       for h in range(1, H)])
    weights = np.array([H - h for h in range(1, H)], dtype=float)
    expansion = _expansion(grid, T1)
    rep = BoundReport(1, H, lhs, float(lip_R * (weights * errors).sum()), errors, weights, lip_R)
    rep.flags = {"model_expansion": expansion, "model_expansive": expansion > 1.0,
                 "policy_state_dependent": _state_dependent(pi)}
    return rep


def check_theorem2(grid: GridWorld, model, policy, H: int, lip_R: float | None = None,
                   start=None) -> BoundReport:
    """Multi-step bound: ``Lip(R) sum_{h<H} E||T_h(s_1, a_h) - T_hat_h(s_1, a_h)||``."""
    _require_deterministic(grid)
    if H < 1:
        raise ValueError("H must be >= 1")
    lip_R = lipschitz_reward_constant(grid) if lip_R is None else lip_R
    pi = policy_table(policy, grid.all_states())
    if isinstance(model, (list, tuple)):
        heads = list(model)
    else:
        if model.horizon < H - 1:
            raise ValueError(f"model horizon {model.horizon} < H-1 = {H - 1}")
        heads = [head_table(grid, model, h) for h in range(1, H)]
    true_heads = [true_head_table(grid, h) for h in range(1, H)]
    ev = exact_value(grid, pi, H, start)
    v_true, true_probs = fixed_origin_value(grid, true_heads, pi, H)
    assert np.allclose(v_true, ev.values)
    v_hat, _ = fixed_origin_value(grid, heads, pi, H)
    lhs = abs(float(ev.start @ (ev.values - v_hat)))
    errors = np.array([float(ev.start @ (true_probs[h - 1] * _l1(grid, true_heads[h - 1],
                                                                    heads[h - 1])).sum(axis=1))
                       for h in range(1, H)])
    weights = np.ones(H - 1)
    rep = BoundReport(2, H, lhs, float(lip_R * errors.sum()), errors, weights, lip_R)
    rep.flags = {"policy_state_dependent": _state_dependent(pi)}
    return rep


# ---------------------------------------------------------------------------
# corruptions for the bound trials

def _shift_one_cell(grid: GridWorld, idx: int, rng) -> int:
    s = grid.decode(idx)[0]
    while True:
        j = int(rng.integers(4))
        step = 1 if rng.random() < 0.5 else -1
        t = s.copy()
        t[j] += step
        if 0 <= t[j] < grid.n:
            return int(grid.index(t)[0])


def corrupt_one_step(grid: GridWorld, rng, max_entries: int = 5,
                     mode: str = "shift") -> TabularGridModel:
    """Exact one-step model with a few ``(s, a)`` predictions moved.

    ``shift`` moves a prediction by one cell; ``random`` replaces it with any state.
    """
    T = grid.transition_table()
    nS, nA = T.shape
    over = {}
    for _ in range(int(rng.integers(1, max_entries + 1))):
        s, a = int(rng.integers(nS)), int(rng.integers(nA))
        tgt = _shift_one_cell(grid, T[s, a], rng) if mode == "shift" else int(rng.integers(nS))
        over[(1, s, (a,))] = tgt
    return TabularGridModel(grid, 1, "one-step", over)


def corrupt_heads(grid: GridWorld, H: int, rng, max_entries: int = 5,
                  mode: str = "shift", only_h: int | None = None) -> TabularGridModel:
    """Exact multi-step model with a few ``(h, s, a_1..a_h)`` predictions moved."""
    nS, nA = grid.num_states, grid.spec.num_actions
    over = {}
    for _ in range(int(rng.integers(1, max_entries + 1))):
        h = only_h or int(rng.integers(1, max(H - 1, 1) + 1))
        s = int(rng.integers(nS))
        acts = tuple(int(a) for a in rng.integers(nA, size=h))
        code = 0
        for a in acts:
            code = code * nA + a
        true = true_head_table(grid, h)[s, code]
        tgt = _shift_one_cell(grid, true, rng) if mode == "shift" else int(rng.integers(nS))
        over[(h, s, acts)] = tgt
    return TabularGridModel(grid, H, "m3", over)


def composed_heads(T1: np.ndarray, H: int) -> list[np.ndarray]:
    """Head tables of the multi-step model ``T_h = (T_1)^h`` built from a one-step table."""
    nS = len(T1)
    heads, cur = [], np.arange(nS)[:, None]
    for _ in range(H):
        cur = T1[cur, :].reshape(nS, -1)
        heads.append(cur)
    return heads


@dataclass
class SideBySide:
    H: int
    theorem1: BoundReport
    theorem2: BoundReport

    @property
    def gap(self) -> float:
        return self.theorem1.rhs - self.theorem2.rhs


def side_by_side(grid: GridWorld, one_step_model, policy, H: int, lip_R=None) -> SideBySide:
    """Same corrupted ``T_1`` scored by both bounds; the multi-step model is ``(T_1)^h``."""
    T1 = one_step_table(grid, one_step_model)
    t1 = check_theorem1(grid, T1, policy, H, lip_R)
    t2 = check_theorem2(grid, composed_heads(T1, max(H - 1, 1))[:H - 1], policy, H, lip_R)
    return SideBySide(H, t1, t2)


def monte_carlo_value(grid: GridWorld, model, policy, H: int, episodes: int, rng,
                      start=None) -> tuple[float, float]:
    """Mean and standard error of ``sum_{h<=H} R`` along composed model rollouts."""
    pi_fn = policy.probs
    S = grid.all_states()
    nS = len(S)
    d0 = np.full(nS, 1.0 / nS) if start is None else np.asarray(start, dtype=float)
    idx = rng.choice(nS, size=episodes, p=d0)
    s = S[idx]
    total = np.zeros(episodes)
    from .rollout import sample_actions
    R = grid.reward_table()
    for _ in range(H):
        a = sample_actions(pi_fn(s), rng)
        total += R[grid.index(s), a]
        s, _ = model.predict_batch(s, a[:, None])
    return float(total.mean()), float(total.std(ddof=1) / np.sqrt(episodes))
