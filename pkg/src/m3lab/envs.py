"""Control environments and the mini-Pacman gridworld.

Environments are stateless: ``step(s, a, rng)`` is a function of its
arguments, so models, planners and the diagnostics harness can query the
true dynamics at arbitrary states. Episode bookkeeping (step caps) lives in
:func:`run_episode`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    num_actions: int
    horizon_cap: int
    reward_fn: str
    is_deterministic: bool
    scale: np.ndarray = field(repr=False)
    low: np.ndarray = field(repr=False)
    high: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.state_dim < 1 or self.num_actions < 2 or self.horizon_cap < 1:
            raise ValueError(f"invalid EnvSpec {self}")


@dataclass
class Episode:
    states: np.ndarray        # (T, d)
    actions: np.ndarray       # (T,)
    rewards: np.ndarray       # (T,)
    next_states: np.ndarray   # (T, d)
    dones: np.ndarray         # (T,) terminal flags
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())

    def state_at(self, i: int) -> np.ndarray:
        """State after ``i`` recorded steps (0 is the first state)."""
        return self.states[i] if i < len(self) else self.next_states[-1]


class Env:
    spec: EnvSpec

    def reset(self, seed) -> np.ndarray:
        raise NotImplementedError

    def step(self, s, a: int, rng=None):
        raise NotImplementedError

    def is_terminal(self, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reward(self, states, actions, next_states) -> np.ndarray:
        """Vectorized reward for (possibly predicted) transitions."""
        raise NotImplementedError

    def clip(self, states: np.ndarray) -> np.ndarray:
        return np.clip(states, self.spec.low, self.spec.high)

    def _check_action(self, a):
        if not 0 <= int(a) < self.spec.num_actions:
            raise ValueError(f"invalid action {a} for {self.spec.name}")
        return int(a)


class CartPole(Env):
    """Cart-pole balancing with the classic equations, Euler step tau=0.02."""

    gravity = 9.8
    mass_cart = 1.0
    mass_pole = 0.1
    half_length = 0.5
    force_mag = 10.0
    tau = 0.02
    x_threshold = 2.4
    theta_threshold = 12 * 2 * math.pi / 360
    init_range = 0.05

    def __init__(self, horizon_cap: int = 200):
        high = np.array([4.8, 10.0, 0.8, 10.0])
        self.spec = EnvSpec("cartpole", 4, 2, horizon_cap, "+1 per step", True,
                            scale=np.array([2.4, 2.0, 0.21, 2.0]), low=-high, high=high)

    def reset(self, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return rng.uniform(-self.init_range, self.init_range, size=4)

    def dynamics(self, S: np.ndarray, A: np.ndarray) -> np.ndarray:
        x, x_dot, theta, theta_dot = S.T
        force = np.where(A == 1, self.force_mag, -self.force_mag)
        total = self.mass_cart + self.mass_pole
        pml = self.mass_pole * self.half_length
        cos, sin = np.cos(theta), np.sin(theta)
        temp = (force + pml * theta_dot ** 2 * sin) / total
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.half_length * (4.0 / 3.0 - self.mass_pole * cos ** 2 / total))
        x_acc = temp - pml * theta_acc * cos / total
        return np.stack([x + self.tau * x_dot,
                         x_dot + self.tau * x_acc,
                         theta + self.tau * theta_dot,
                         theta_dot + self.tau * theta_acc], axis=1)

    def step(self, s, a, rng=None):
        a = self._check_action(a)
        s2 = self.dynamics(np.asarray(s, dtype=float)[None, :], np.array([a]))[0]
        done = bool(self.is_terminal(s2[None, :])[0])
        return s2, 1.0, done

    def is_terminal(self, states):
        states = np.atleast_2d(states)
        return (np.abs(states[:, 0]) > self.x_threshold) | (
            np.abs(states[:, 2]) > self.theta_threshold)

    def reward(self, states, actions, next_states):
        return np.ones(len(np.atleast_2d(states)))


class Acrobot(Env):
    """Two-link swing-up with the book dynamics.

    The 0.2 s control interval is integrated with 10 explicit Euler substeps.
    Observation is ``[cos t1, sin t1, cos t2, sin t2, dt1, dt2]``.
    """

    dt = 0.2
    substeps = 10
    link_length_1 = 1.0
    link_mass_1 = 1.0
    link_mass_2 = 1.0
    link_com_1 = 0.5
    link_com_2 = 0.5
    link_moi = 1.0
    gravity = 9.8
    max_vel_1 = 4 * math.pi
    max_vel_2 = 9 * math.pi
    torques = (-1.0, 0.0, 1.0)

    def __init__(self, horizon_cap: int = 500):
        high = np.array([1.0, 1.0, 1.0, 1.0, self.max_vel_1, self.max_vel_2])
        self.spec = EnvSpec("acrobot", 6, 3, horizon_cap, "-1 per step", True,
                            scale=np.array([1.0, 1.0, 1.0, 1.0, 4.0, 8.0]),
                            low=-high, high=high)

    def reset(self, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return self._observe(rng.uniform(-0.1, 0.1, size=(1, 4)))[0]

    @staticmethod
    def _observe(raw):
        t1, t2, d1, d2 = raw.T
        return np.stack([np.cos(t1), np.sin(t1), np.cos(t2), np.sin(t2), d1, d2], axis=1)

    def _accel(self, t1, t2, d1, d2, torque):
        m1, m2 = self.link_mass_1, self.link_mass_2
        l1, lc1, lc2 = self.link_length_1, self.link_com_1, self.link_com_2
        I1 = I2 = self.link_moi
        g = self.gravity
        dd1 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * np.cos(t2)) + I1 + I2
        dd2 = m2 * (lc2 ** 2 + l1 * lc2 * np.cos(t2)) + I2
        phi2 = m2 * lc2 * g * np.cos(t1 + t2 - math.pi / 2.0)
        phi1 = (-m2 * l1 * lc2 * d2 ** 2 * np.sin(t2)
                - 2 * m2 * l1 * lc2 * d2 * d1 * np.sin(t2)
                + (m1 * lc1 + m2 * l1) * g * np.cos(t1 - math.pi / 2.0) + phi2)
        acc2 = (torque + dd2 / dd1 * phi1 - m2 * l1 * lc2 * d1 ** 2 * np.sin(t2) - phi2) / (
            m2 * lc2 ** 2 + I2 - dd2 ** 2 / dd1)
        acc1 = -(dd2 * acc2 + phi1) / dd1
        return acc1, acc2

    def dynamics(self, S: np.ndarray, A: np.ndarray) -> np.ndarray:
        t1 = np.arctan2(S[:, 1], S[:, 0])
        t2 = np.arctan2(S[:, 3], S[:, 2])
        d1, d2 = S[:, 4].copy(), S[:, 5].copy()
        torque = np.asarray(self.torques)[A]
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            a1, a2 = self._accel(t1, t2, d1, d2, torque)
            t1, t2 = t1 + h * d1, t2 + h * d2
            d1, d2 = d1 + h * a1, d2 + h * a2
        d1 = np.clip(d1, -self.max_vel_1, self.max_vel_1)
        d2 = np.clip(d2, -self.max_vel_2, self.max_vel_2)
        return self._observe(np.stack([t1, t2, d1, d2], axis=1))

    def step(self, s, a, rng=None):
        a = self._check_action(a)
        s2 = self.dynamics(np.asarray(s, dtype=float)[None, :], np.array([a]))[0]
        return s2, -1.0, bool(self.is_terminal(s2[None, :])[0])

    def is_terminal(self, states):
        S = np.atleast_2d(states)
        c1, s1, c2, s2 = S[:, 0], S[:, 1], S[:, 2], S[:, 3]
        return -c1 - (c1 * c2 - s1 * s2) > 1.0

    def reward(self, states, actions, next_states):
        return -np.ones(len(np.atleast_2d(states)))


# Gridworld actions: (dx, dy)
UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
MOVES = np.array([(0, 1), (0, -1), (-1, 0), (1, 0)])


class GridWorld(Env):
    """Mini-Pacman: reach the top-right corner while a ghost wanders randomly.

    State vector is ``[agent_x, agent_y, ghost_x, ghost_y]`` in cell units.
    Capture (same cell after moving, or swapping cells) ends the episode with
    ``capture_reward``; reaching the goal ends it with ``goal_reward``; every
    other step costs ``step_reward``.

    ``frozen_ghost=True`` gives the deterministic variant used by the bound
    checks; ``terminate=False`` removes terminal states entirely.
    """

    def __init__(self, n: int = 5, goal_reward: float = 10.0, capture_reward: float = -1.0,
                 step_reward: float = -0.1, horizon_cap: int = 1000,
                 frozen_ghost: bool = False, terminate: bool = True,
                 ghost_start="random"):
        if n < 2:
            raise ValueError("grid must be at least 2x2")
        self.n = n
        self.goal = (n - 1, n - 1)
        self.goal_reward = goal_reward
        self.capture_reward = capture_reward
        self.step_reward = step_reward
        self.frozen_ghost = frozen_ghost
        self.terminate = terminate
        self.ghost_start = ghost_start
        high = np.full(4, n - 1.0)
        self.spec = EnvSpec("gridworld", 4, 4, horizon_cap,
                            f"{goal_reward:+g} goal / {capture_reward:+g} capture / "
                            f"{step_reward:+g} step",
                            frozen_ghost, scale=np.full(4, float(n - 1)),
                            low=np.zeros(4), high=high)

    @property
    def num_states(self) -> int:
        return self.n ** 4

    # -- encoding ---------------------------------------------------------
    def index(self, states) -> np.ndarray:
        S = np.rint(np.atleast_2d(states)).astype(int)
        if np.any(S < 0) or np.any(S >= self.n):
            raise ValueError("state outside the grid")
        n = self.n
        return ((S[:, 0] * n + S[:, 1]) * n + S[:, 2]) * n + S[:, 3]

    def decode(self, idx) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        n = self.n
        out = np.empty((len(idx), 4))
        for j in (3, 2, 1, 0):
            out[:, j] = idx % n
            idx = idx // n
        return out

    def all_states(self) -> np.ndarray:
        return self.decode(np.arange(self.num_states))

    def on_grid(self, states) -> np.ndarray:
        S = np.atleast_2d(states)
        return np.all((np.abs(S - np.rint(S)) < 1e-9) & (S > -0.5) & (S < self.n - 0.5), axis=1)

    # -- dynamics ---------------------------------------------------------
    def move_agent(self, states, actions) -> np.ndarray:
        S = np.atleast_2d(np.asarray(states, dtype=float))
        pos = S[:, :2] + MOVES[np.asarray(actions, dtype=int)]
        return np.clip(pos, 0, self.n - 1)

    def ghost_moves(self, gx: int, gy: int) -> list[tuple[int, int]]:
        if self.frozen_ghost:
            return [(gx, gy)]
        out = []
        for dx, dy in MOVES:
            x, y = gx + dx, gy + dy
            if 0 <= x < self.n and 0 <= y < self.n:
                out.append((x, y))
        return out

    def _outcome(self, s, a, ghost_next):
        agent = self.move_agent(s, [a])[0]
        s2 = np.array([agent[0], agent[1], ghost_next[0], ghost_next[1]], dtype=float)
        r = float(self.reward(np.asarray(s)[None, :], np.array([a]), s2[None, :])[0])
        done = bool(self.is_terminal(s2[None, :], prev=np.asarray(s)[None, :])[0])
        return s2, r, done

    def step(self, s, a, rng=None):
        a = self._check_action(a)
        s = np.asarray(s, dtype=float)
        options = self.ghost_moves(int(s[2]), int(s[3]))
        if len(options) == 1:
            pick = options[0]
        else:
            if rng is None:
                raise ValueError("stochastic gridworld step needs an rng")
            pick = options[int(rng.integers(len(options)))]
        return self._outcome(s, a, pick)

    def enumerate_transitions(self, s, a) -> list[tuple[np.ndarray, float]]:
        """Exact next-state distribution as ``[(s', prob), ...]``."""
        a = self._check_action(a)
        s = np.asarray(s, dtype=float)
        options = self.ghost_moves(int(s[2]), int(s[3]))
        p = 1.0 / len(options)
        return [(self._outcome(s, a, g)[0], p) for g in options]

    def captured(self, states, prev=None) -> np.ndarray:
        S = np.atleast_2d(states)
        hit = np.all(np.abs(S[:, :2] - S[:, 2:]) < 0.5, axis=1)
        if prev is not None:
            P = np.atleast_2d(prev)
            swap = (np.all(np.abs(S[:, :2] - P[:, 2:]) < 0.5, axis=1)
                    & np.all(np.abs(S[:, 2:] - P[:, :2]) < 0.5, axis=1))
            hit = hit | swap
        return hit

    def at_goal(self, states) -> np.ndarray:
        S = np.atleast_2d(states)
        return np.all(np.abs(S[:, :2] - np.asarray(self.goal)) < 0.5, axis=1)

    def is_terminal(self, states, prev=None):
        S = np.atleast_2d(states)
        if not self.terminate:
            return np.zeros(len(S), dtype=bool)
        return self.captured(S, prev) | self.at_goal(S)

    def reward(self, states, actions, next_states):
        S2 = np.atleast_2d(next_states)
        cap = self.captured(S2, np.atleast_2d(states))
        goal = self.at_goal(S2)
        return np.where(cap, self.capture_reward,
                        np.where(goal, self.goal_reward, self.step_reward))

    def reset(self, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        if self.ghost_start == "random":
            cells = [(x, y) for x in range(self.n) for y in range(self.n)
                     if x + y >= 2 and (x, y) != self.goal]
            gx, gy = cells[int(rng.integers(len(cells)))]
        else:
            gx, gy = self.ghost_start
        return np.array([0.0, 0.0, gx, gy])

    # -- tables for the deterministic variant ------------------------------
    def transition_table(self) -> np.ndarray:
        """``next[s_idx, a]`` for the frozen-ghost dynamics."""
        if not self.frozen_ghost:
            raise ValueError("transition table needs deterministic (frozen-ghost) dynamics")
        S = self.all_states()
        out = np.empty((len(S), 4), dtype=int)
        for a in range(4):
            nxt = S.copy()
            nxt[:, :2] = self.move_agent(S, np.full(len(S), a))
            out[:, a] = self.index(nxt)
        return out

    def reward_table(self) -> np.ndarray:
        """``R[s_idx, a]``: reward of taking ``a`` in ``s`` (frozen ghost)."""
        S = self.all_states()
        nxt = self.transition_table()
        out = np.empty((len(S), 4))
        for a in range(4):
            out[:, a] = self.reward(S, np.full(len(S), a), self.decode(nxt[:, a]))
        return out


ENVIRONMENTS = {"cartpole": CartPole, "acrobot": Acrobot, "gridworld": GridWorld}


def make_env(name: str, **kwargs) -> Env:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; expected one of "
                         f"{sorted(ENVIRONMENTS)}") from None
    return cls(**kwargs)


def run_episode(env: Env, act, rng: np.random.Generator, seed=None,
                max_steps: int | None = None) -> Episode:
    """Roll out one episode with ``act(state, rng) -> action``.

    Stops on a terminal transition or at the horizon cap (``truncated``).
    """
    cap = env.spec.horizon_cap if max_steps is None else min(max_steps, env.spec.horizon_cap)
    s = env.reset(int(rng.integers(2 ** 63)) if seed is None else seed)
    states, actions, rewards, nexts, dones = [], [], [], [], []
    done = False
    while len(actions) < cap and not done:
        a = int(act(s, rng))
        s2, r, done = env.step(s, a, rng)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        nexts.append(s2)
        dones.append(done)
        s = s2
    return Episode(np.array(states), np.array(actions, dtype=int), np.array(rewards, dtype=float),
                   np.array(nexts), np.array(dones, dtype=bool), truncated=not done)


def random_policy(num_actions: int):
    def act(s, rng):
        return int(rng.integers(num_actions))
    return act
