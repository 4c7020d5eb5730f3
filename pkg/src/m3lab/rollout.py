"""Rollouts through learned models.

Two procedures generate the same kind of trace:

* composed: ``s_hat_{h+1} = T_1(s_hat_h, a_h)``, every prediction fed back in;
* fixed-origin (multi-step model): ``s_hat_{h+1} = T_h(s_1, a_1..a_h)``;
  intermediate predictions only pick the next action.

Policies are objects with ``probs(states) -> (n, num_actions)``.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

COMPOSED = "composed-one-step"
FIXED_ORIGIN = "fixed-origin-m3"


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw, one action per row."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


@dataclass
class RolloutBatch:
    origin: np.ndarray       # (n, d)
    actions: np.ndarray      # (n, H)
    states: np.ndarray       # (n, H, d): s_hat_2 .. s_hat_{H+1}
    cum_rewards: np.ndarray  # (n, H): predicted reward accumulated through step h
    done: np.ndarray         # (n, H): predicted terminal reached at or before step h
    procedure: str

    def trace(self, i: int = 0) -> "RolloutTrace":
        return RolloutTrace(self.origin[i], self.actions[i], self.states[i],
                            self.cum_rewards[i], self.procedure)


@dataclass
class RolloutTrace:
    origin: np.ndarray
    actions: np.ndarray
    states: np.ndarray
    cum_rewards: np.ndarray
    procedure: str

    def __len__(self):
        return len(self.actions)

    def csv_rows(self, run_id) -> list[list]:
        return [[run_id, h + 1, int(self.actions[h]), *map(float, self.states[h]),
                 float(self.cum_rewards[h])] for h in range(len(self))]

    def to_csv(self, run_id) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = len(self.origin)
        w.writerow(["run_id", "h", "action", *[f"s{j}" for j in range(d)], "cum_reward"])
        w.writerows(self.csv_rows(run_id))
        return buf.getvalue()


def rollout_batch(model, S1, policy, H: int, rng: np.random.Generator,
                  first_actions=None, env=None) -> RolloutBatch:
    """Vectorized rollout; the procedure follows ``model.kind``.

    ``first_actions`` forces ``a_1``. When ``env`` is given, a predicted
    terminal state freezes the accumulated reward from that step on.
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    S1 = np.atleast_2d(np.asarray(S1, dtype=float))
    n = len(S1)
    fixed_origin = model.kind == "m3"
    if fixed_origin and H > model.horizon:
        raise ValueError(f"rollout horizon {H} exceeds model horizon {model.horizon}")
    actions = np.zeros((n, H), dtype=int)
    states = np.zeros((n, H, S1.shape[1]))
    cum = np.zeros((n, H))
    done = np.zeros((n, H), dtype=bool)
    if first_actions is None:
        actions[:, 0] = sample_actions(policy.probs(S1), rng)
    else:
        actions[:, 0] = np.broadcast_to(np.asarray(first_actions, dtype=int), (n,))
    cur = S1
    running = np.zeros(n)
    stopped = np.zeros(n, dtype=bool)
    for h in range(1, H + 1):
        if fixed_origin:
            nxt, c = model.predict_batch(S1, actions[:, :h])
            step_total = c
        else:
            nxt, r = model.predict_batch(cur, actions[:, h - 1:h])
            step_total = running + r
        running = np.where(stopped, running, step_total)
        if env is not None:
            stopped = stopped | env.is_terminal(nxt)
        states[:, h - 1] = nxt
        cum[:, h - 1] = running
        done[:, h - 1] = stopped
        cur = nxt
        if h < H:
            actions[:, h] = sample_actions(policy.probs(nxt), rng)
    return RolloutBatch(S1, actions, states, cum, done,
                        FIXED_ORIGIN if fixed_origin else COMPOSED)


def composed_rollout(model, s1, policy, H: int, rng, env=None) -> RolloutTrace:
    if H < 1:
        raise ValueError("H must be >= 1")
    if model.kind == "m3":
        model = model.as_one_step()
    return rollout_batch(model, np.asarray(s1)[None, :], policy, H, rng, env=env).trace()


def m3_rollout(model, s1, policy, H: int, rng, env=None) -> RolloutTrace:
    if model.kind != "m3":
        raise ValueError("fixed-origin rollouts need a multi-step model")
    if H > model.horizon:
        raise ValueError(f"rollout horizon {H} exceeds model horizon {model.horizon}")
    return rollout_batch(model, np.asarray(s1)[None, :], policy, H, rng, env=env).trace()


def action_sequence_probability(model, s, actions, policy) -> float:
    """``pi(a_1|s) * prod_h pi(a_h | T_{h-1}(s, a_1..a_{h-1}))``."""
    A = np.asarray(list(actions), dtype=int)
    if model.kind == "m3" and len(A) > model.horizon:
        raise ValueError(f"sequence of length {len(A)} exceeds model horizon {model.horizon}")
    s = np.asarray(s, dtype=float)[None, :]
    p = float(policy.probs(s)[0, A[0]])
    for h in range(1, len(A)):
        pred, _ = model.predict_batch(s, A[None, :h])
        p *= float(policy.probs(pred)[0, A[h]])
    return p


def sequence_probabilities(model, s, H: int, policy) -> tuple[np.ndarray, np.ndarray]:
    """All ``|A|^H`` sequences (lexicographic) and their probabilities, batched."""
    nA = policy.num_actions
    seqs = np.array(list(itertools.product(range(nA), repeat=H)), dtype=int)
    S = np.repeat(np.asarray(s, dtype=float)[None, :], len(seqs), axis=0)
    p = policy.probs(S)[np.arange(len(seqs)), seqs[:, 0]]
    for h in range(1, H):
        pred, _ = model.predict_batch(S, seqs[:, :h])
        p = p * policy.probs(pred)[np.arange(len(seqs)), seqs[:, h]]
    return seqs, p


# ---------------------------------------------------------------------------
# ensemble of paths

@lru_cache(maxsize=None)
def _paths_recurrence(H: int) -> int:
    return 1 + sum(_paths_recurrence(h) for h in range(1, H))


def count_paths(H: int) -> int:
    """Number of ways to chain heads to reach ``H`` steps (compositions of H)."""
    if H < 1:
        raise ValueError("H must be >= 1")
    c = _paths_recurrence(H)
    assert c == 2 ** (H - 1)
    return c


def sample_path(H: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform composition of ``H`` via independent fair cuts between steps."""
    if H < 1:
        raise ValueError("H must be >= 1")
    cuts = rng.random(H - 1) < 0.5
    parts, run = [], 1
    for c in cuts:
        if c:
            parts.append(run)
            run = 1
        else:
            run += 1
    parts.append(run)
    return tuple(parts)


def chain_path(model, S1, A, path) -> np.ndarray:
    """Follow one path: ``T_{h1}`` from ``s_1``, then ``T_{h2}`` on that, and so on."""
    A = np.atleast_2d(np.asarray(A, dtype=int))
    if sum(path) != A.shape[1]:
        raise ValueError(f"path {path} does not cover {A.shape[1]} steps")
    s = np.atleast_2d(np.asarray(S1, dtype=float))
    k = 0
    for hop in path:
        s, _ = model.predict_batch(s, A[:, k:k + hop])
        k += hop
    return s


def ensemble_predict_batch(model, S1, A, num_paths: int, rng: np.random.Generator,
                           paths=None) -> np.ndarray:
    """Mean endpoint over ``num_paths`` uniformly sampled paths, per row."""
    if num_paths < 1:
        raise ValueError("num_paths must be >= 1")
    S1 = np.atleast_2d(np.asarray(S1, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=int))
    H = A.shape[1]
    if H > model.horizon:
        raise ValueError(f"sequence length {H} exceeds model horizon {model.horizon}")
    total = np.zeros_like(S1)
    for j in range(num_paths):
        if paths is not None:
            chosen = [tuple(paths[j])] * len(S1)
        else:
            chosen = [sample_path(H, rng) for _ in range(len(S1))]
        groups: dict[tuple, list[int]] = {}
        for i, p in enumerate(chosen):
            groups.setdefault(p, []).append(i)
        for p, rows in groups.items():
            rows = np.asarray(rows)
            total[rows] += chain_path(model, S1[rows], A[rows], p)
    return total / num_paths


def ensemble_predict(model, s1, actions, num_paths: int, rng, paths=None) -> np.ndarray:
    A = np.asarray(list(actions), dtype=int)[None, :]
    return ensemble_predict_batch(model, np.asarray(s1)[None, :], A, num_paths, rng, paths)[0]
