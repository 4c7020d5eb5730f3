import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m3lab.agents import UniformPolicy
from m3lab.diagnostics import (TabularMDP, bound_csv, check_theorem1, check_theorem2,
                               composed_heads, corrupt_heads, corrupt_one_step, ensemble_errors,
                               exact_value, h_step_error, head_table, lipschitz_reward_constant,
                               monte_carlo_value, one_step_table, side_by_side, true_head_table)
from m3lab.envs import CartPole, GridWorld, random_policy, run_episode
from m3lab.models import M3Model, TabularGridModel

GRID = GridWorld(frozen_ghost=True, terminate=False)


def chain():
    """Two states; action 0 stays, action 1 swaps. Reward 1 in state 1."""
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1
    P[0, 1, 1] = P[1, 1, 0] = 1
    R = np.array([[0.0, 0.0], [1.0, 1.0]])
    return TabularMDP(P, R)


def test_exact_value_zero_horizon():
    ev = exact_value(chain(), np.full((2, 2), 0.5), 0)
    assert np.all(ev.values == 0)


def test_exact_value_single_state():
    mdp = TabularMDP(np.ones((1, 1, 1)), np.array([[2.0]]))
    assert exact_value(mdp, np.ones((1, 1)), 5).values[0] == pytest.approx(10.0)


def test_exact_value_chain_hand_computed():
    stay = np.array([[1.0, 0.0], [1.0, 0.0]])
    swap = np.array([[0.0, 1.0], [0.0, 1.0]])
    assert np.allclose(exact_value(chain(), stay, 3).values, [0, 3])
    assert np.allclose(exact_value(chain(), swap, 3).values, [1, 2])
    half = exact_value(chain(), np.full((2, 2), 0.5), 4).values
    assert np.allclose(half, [1.5, 2.5])  # first reward is the start state's, then 1/2 each


def test_exact_value_monte_carlo_agrees():
    pol = UniformPolicy(4)
    H = 5
    ev = exact_value(GRID, pol, H)
    mc, se = monte_carlo_value(GRID, TabularGridModel(GRID), pol, H, 20_000,
                               np.random.default_rng(0))
    assert abs(mc - ev.values.mean()) < 4 * se


def test_exact_value_stochastic_grid_monte_carlo():
    grid = GridWorld(terminate=False)
    ev = exact_value(grid, UniformPolicy(4), 3)
    s0 = np.array([1.0, 1.0, 3.0, 3.0])
    rng = np.random.default_rng(1)
    tot = []
    for _ in range(6000):
        s, g = s0, 0.0
        for _ in range(3):
            s, r, _ = grid.step(s, int(rng.integers(4)), rng)
            g += r
        tot.append(g)
    i = grid.index(s0)[0]
    assert abs(np.mean(tot) - ev.values[i]) < 4 * np.std(tot) / np.sqrt(len(tot))


def test_lipschitz_examples():
    flat = GridWorld(goal_reward=-0.1, capture_reward=-0.1, frozen_ghost=True)
    assert lipschitz_reward_constant(flat) == pytest.approx(0.0)
    # moving next to the goal changes reward from -0.1 to 10 across one cell
    assert lipschitz_reward_constant(GRID) == pytest.approx(11.0)


def test_tables_of_exact_model():
    m = TabularGridModel(GRID, 3, "m3")
    assert np.array_equal(one_step_table(GRID, m), GRID.transition_table())
    for h in (1, 2, 3):
        assert np.array_equal(head_table(GRID, m, h), true_head_table(GRID, h))
    heads = composed_heads(GRID.transition_table(), 3)
    assert all(np.array_equal(heads[h - 1], true_head_table(GRID, h)) for h in (1, 2, 3))


@pytest.mark.parametrize("H", [1, 2, 4])
def test_theorems_perfect_model(H):
    pol = UniformPolicy(4)
    r1 = check_theorem1(GRID, TabularGridModel(GRID), pol, H)
    r2 = check_theorem2(GRID, TabularGridModel(GRID, max(H - 1, 1), "m3"), pol, H)
    for r in (r1, r2):
        assert r.lhs == pytest.approx(0.0, abs=1e-12) and r.rhs == 0.0 and r.holds


def test_theorem1_weights_and_rows():
    r = check_theorem1(GRID, corrupt_one_step(GRID, np.random.default_rng(2)),
                       UniformPolicy(4), 4)
    assert list(r.weights) == [3, 2, 1] and r.holds
    assert len(r.rows()) == 3
    assert bound_csv([r]).splitlines()[0] == \
        "trial,theorem,H,h,error_h,weight_h,term_h,lhs,rhs,holds"


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 5), st.sampled_from(["shift", "random"]))
def test_theorem_bounds_hold_random_corruptions(seed, H, mode):
    rng = np.random.default_rng(seed)
    pol = UniformPolicy(4)
    assert check_theorem1(GRID, corrupt_one_step(GRID, rng, mode=mode), pol, H).holds
    assert check_theorem2(GRID, corrupt_heads(GRID, H, rng, mode=mode), pol, H).holds


def test_theorem2_only_last_head_corrupted():
    """Corrupting only h = H-1 gives a single non-zero error term."""
    H = 4
    m = corrupt_heads(GRID, H, np.random.default_rng(3), only_h=H - 1)
    r = check_theorem2(GRID, m, UniformPolicy(4), H)
    assert r.errors[:-1].tolist() == [0.0, 0.0] and r.errors[-1] > 0 and r.holds


def test_theorem2_horizon_check():
    with pytest.raises(ValueError):
        check_theorem2(GRID, TabularGridModel(GRID, 2, "m3"), UniformPolicy(4), 4)
    with pytest.raises(ValueError):
        check_theorem1(GridWorld(), TabularGridModel(GRID), UniformPolicy(4), 2)


def test_side_by_side_gap_nonnegative():
    rng = np.random.default_rng(4)
    for H in (2, 3, 5):
        sbs = side_by_side(GRID, corrupt_one_step(GRID, rng), UniformPolicy(4), H)
        assert sbs.theorem1.holds and sbs.theorem2.holds
        assert sbs.gap >= -1e-9


def test_h_step_error_perfect_model_zero():
    ep = run_episode(GRID, random_policy(4), np.random.default_rng(0))
    for model in (TabularGridModel(GRID), TabularGridModel(GRID, 3, "m3")):
        rep = h_step_error(model, ep, 3)
        assert np.all(rep.errors[rep.counts > 0] == 0)
        assert rep.counts[0] == len(ep)


def test_h_step_error_counts():
    env = CartPole()
    ep = run_episode(env, random_policy(2), np.random.default_rng(1))
    rep = h_step_error(M3Model(env, 4), ep, 4)
    assert rep.counts.tolist() == [len(ep) - h + 1 for h in range(1, 5)]
    with pytest.raises(ValueError):
        h_step_error(M3Model(env, 2), ep, 4)


def test_ensemble_errors_exact_model():
    eps = [run_episode(GRID, random_policy(4), np.random.default_rng(i)) for i in range(3)]
    out = ensemble_errors(TabularGridModel(GRID, 4, "m3"), eps, 4, [1, 2, 4],
                          np.random.default_rng(0))
    assert set(out) == {"direct", "composed", 1, 2, 4}
    assert all(v == 0 for v in out.values())
