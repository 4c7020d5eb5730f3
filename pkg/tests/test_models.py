import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m3lab.envs import Env, EnvSpec, Episode, GridWorld, random_policy, run_episode
from m3lab.models import (ActionSequence, EMHead, EMModel, HallucinatedModel, M3Model,
                          ModelConfig, OneStepModel, TabularGridModel, build_dataset,
                          decode_h_hot, em_fit, em_sample, h_hot, load_model, predict,
                          save_model, train_hallucinated, train_multi_step, train_one_step)


class Line(Env):
    """1-D toy environment for the EM oracle."""

    def __init__(self):
        self.spec = EnvSpec("line", 1, 2, 10, "none", False, scale=np.ones(1),
                            low=np.full(1, -1e9), high=np.full(1, 1e9))

    def reward(self, states, actions, next_states):
        return np.zeros(len(np.atleast_2d(states)))


def make_episode(states, actions, rewards):
    S = np.asarray(states, dtype=float)
    return Episode(S[:-1], np.asarray(actions), np.asarray(rewards, dtype=float), S[1:],
                   np.zeros(len(actions), dtype=bool))


def grid_pairs(grid: GridWorld, h: int):
    """Every (state, action-sequence) pair of the frozen grid as a dataset of windows."""
    S = grid.all_states()
    eps = []
    T = grid.transition_table()
    rng = np.random.default_rng(0)
    for i in range(len(S)):
        acts = rng.integers(4, size=h + 3)
        cur, states = i, [S[i]]
        for a in acts:
            cur = T[cur, a]
            states.append(S[cur])
        eps.append(make_episode(states, acts, np.zeros(len(acts))))
    return eps


def test_dataset_counts():
    ep = make_episode(np.arange(4)[:, None], [0, 1, 0], [1, 2, 3])
    data = build_dataset([ep], 8)
    assert [data.count(h) for h in range(1, 6)] == [3, 2, 1, 0, 0]
    assert [len(data.samples(h)) for h in range(1, 5)] == [3, 2, 1, 0]


def test_dataset_windows():
    ep = make_episode(np.arange(5)[:, None] * 1.5, [0, 1, 0, 1], [1, 2, 3, 4])
    smp = build_dataset([ep], 3).samples(2)
    assert np.array_equal(smp.targets[:, 0], smp.states[:, 0] + 3.0)
    assert np.array_equal(smp.cum_rewards, [3, 5, 7])
    assert np.array_equal(smp.actions, [[0, 1], [1, 0], [0, 1]])


def test_dataset_rejects_bad_horizon():
    with pytest.raises(ValueError):
        build_dataset([make_episode([[0], [1]], [0], [0])], 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 5), st.integers(0, 1000))
def test_dataset_consistency(T, H, seed):
    rng = np.random.default_rng(seed)
    ep = make_episode(rng.normal(size=(T + 1, 2)), rng.integers(3, size=T), rng.normal(size=T))
    data = build_dataset([ep], H)
    for h in range(1, H + 1):
        smp = data.samples(h)
        for k, (s, a, t, r) in enumerate(zip(smp.states, smp.actions, smp.targets,
                                             smp.cum_rewards)):
            assert np.array_equal(s, ep.states[k])
            assert np.array_equal(t, ep.state_at(k + h))
            assert np.array_equal(a, ep.actions[k:k + h])
            assert r == pytest.approx(ep.rewards[k:k + h].sum())


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(2, 4), st.data())
def test_h_hot_properties(H, nA, data):
    h = data.draw(st.integers(1, H))
    a = data.draw(st.lists(st.integers(0, nA - 1), min_size=h, max_size=h))
    b = data.draw(st.lists(st.integers(0, nA - 1), min_size=h, max_size=h))
    ea, eb = ActionSequence(tuple(a)).encode(H, nA), ActionSequence(tuple(b)).encode(H, nA)
    assert ea.shape == (H * nA,) and ea.sum() == h
    assert decode_h_hot(ea, H, nA) == a
    assert (a == b) == np.array_equal(ea, eb)


def test_h_hot_too_long():
    with pytest.raises(ValueError):
        h_hot([[0, 1, 0]], 2, 2)


def test_one_step_learns_agent_moves():
    grid = GridWorld(frozen_ghost=True, terminate=False)
    data = build_dataset(grid_pairs(grid, 1), 1)
    model = train_one_step(data, grid, ModelConfig(epochs=40, lr=3e-3, seed=1))
    S = grid.all_states()
    for a in range(4):
        pred, _ = model.predict_batch(S, np.full((len(S), 1), a))
        true = grid.move_agent(S, np.full(len(S), a))
        assert np.abs(pred[:, :2] - true).max() < 0.5


def test_m3_two_step_agent_moves():
    grid = GridWorld(frozen_ghost=True, terminate=False)
    data = build_dataset(grid_pairs(grid, 2), 2)
    model = train_multi_step(data, grid, 2, ModelConfig(epochs=40, lr=3e-3, seed=1))
    s, _ = predict(model, [0, 0, 4, 4], [0, 0])
    assert np.allclose(s[:2], [0, 2], atol=0.5)
    smp = data.samples(2)
    pred, _ = model.predict_batch(smp.states, smp.actions)
    assert np.abs(pred[:, :2] - smp.targets[:, :2]).max() < 0.5
    assert np.all(np.isfinite(pred))


def test_memorize_single_transition():
    grid = GridWorld()
    s, s2 = [1, 1, 3, 3], [1, 2, 3, 2]
    ep = make_episode([s, s2] * 1, [0], [-0.1])
    data = build_dataset([ep] * 30, 1)
    model = train_one_step(data, grid, ModelConfig(epochs=100, lr=3e-3))
    pred, r = predict(model, s, [0])
    assert np.abs(pred - s2).sum() < 1e-2
    assert abs(r + 0.1) < 1e-2


def test_loss_trace_nonincreasing():
    grid = GridWorld(frozen_ghost=True, terminate=False)
    data = build_dataset(grid_pairs(grid, 1), 1)
    trace = OneStepModel(grid, ModelConfig(epochs=15)).fit(data)
    assert all(b <= a * 1.05 for a, b in zip(trace, trace[1:]))


def test_m3_h1_matches_one_step():
    grid = GridWorld()
    eps = [run_episode(grid, random_policy(4), np.random.default_rng(i)) for i in range(5)]
    H = 3
    data = build_dataset(eps, H)
    cfg = ModelConfig(epochs=3, seed=4)
    m3 = train_multi_step(data, grid, H, cfg)
    one = train_one_step(data, grid, ModelConfig(epochs=3, seed=4, action_blocks=H))
    S = grid.all_states()[:50]
    A = np.ones((50, 1), dtype=int)
    assert np.array_equal(m3.predict_batch(S, A)[0], one.predict_batch(S, A)[0])
    assert np.array_equal(m3.as_one_step().predict_batch(S, A)[0], m3.predict_batch(S, A)[0])


def test_untrained_delta_is_identity():
    grid = GridWorld()
    m = M3Model(grid, 2)
    for hd in m.heads:
        for W in hd.transition.net.weights:
            W[:] = 0
    s = np.array([2.0, 1.0, 3.0, 3.0])
    assert np.array_equal(predict(m, s, [1, 2])[0], s)


def test_predict_too_long():
    with pytest.raises(ValueError):
        predict(M3Model(GridWorld(), 2), [0, 0, 1, 1], [0, 0, 0])
    with pytest.raises(ValueError):
        OneStepModel(GridWorld()).predict_batch(np.zeros((1, 4)), [[0, 1]])


def test_hallucination_depth_zero_is_one_step():
    grid = GridWorld()
    eps = [run_episode(grid, random_policy(4), np.random.default_rng(i)) for i in range(3)]
    data = build_dataset(eps, 1)
    cfg = ModelConfig(epochs=4, halluc_depth=0, seed=2)
    a = train_hallucinated(data, grid, cfg)
    b = train_one_step(data, grid, cfg)
    S = grid.all_states()[:40]
    A = np.zeros((40, 1), dtype=int)
    assert np.array_equal(a.predict_batch(S, A)[0], b.predict_batch(S, A)[0])


def test_hallucinated_pairs_of_perfect_model():
    grid = GridWorld(frozen_ghost=True, terminate=False, horizon_cap=12)
    ep = run_episode(grid, random_policy(4), np.random.default_rng(3))
    model = HallucinatedModel(grid, ModelConfig(halluc_depth=3))
    model.predict_batch = TabularGridModel(grid).predict_batch
    S, A, T, _ = model.hallucinated_pairs(build_dataset([ep], 1))
    for s, a, t in zip(S, A[:, 0], T):
        k = [i for i in range(len(ep)) if np.array_equal(ep.states[i], s)
             and ep.actions[i] == a and np.array_equal(ep.next_states[i], t)]
        assert k, "hallucinated pair is not a real pair"


def test_save_load_roundtrip(tmp_path):
    grid = GridWorld()
    eps = [run_episode(grid, random_policy(4), np.random.default_rng(i)) for i in range(3)]
    data = build_dataset(eps, 2)
    for model in (train_multi_step(data, grid, 2, ModelConfig(epochs=2)),
                  train_one_step(data, grid, ModelConfig(epochs=2))):
        save_model(model, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        S = grid.all_states()[:20]
        A = np.ones((20, model.horizon), dtype=int)
        assert np.array_equal(back.predict_batch(S, A)[0], model.predict_batch(S, A)[0])


# -- EM --------------------------------------------------------------------

def bimodal(n=400, seed=0):
    rng = np.random.default_rng(seed)
    S = rng.uniform(-1, 1, size=(n, 1))
    T = S + np.where(rng.random((n, 1)) < 0.5, 1.0, -1.0)
    return S, np.zeros((n, 1), dtype=int), T


def test_em_single_component_posterior():
    S, A, T = bimodal(100)
    head = EMHead(Line(), 1, 1, 1, 0.1, ModelConfig(em_mstep_steps=20))
    q = head.fit(S, A, T, 2)
    assert np.all(q == 1.0)
    assert head.weights.tolist() == [1.0]


def test_em_equal_likelihood_posterior():
    head = EMHead(Line(), 1, 1, 2, 0.1, ModelConfig())
    head.components[1].net = head.components[0].net.copy()
    q = head.posterior(np.zeros((3, 1)), np.zeros((3, 1), dtype=int), np.ones((3, 1)))
    assert np.allclose(q, 0.5)


def test_em_bimodal_oracle():
    S, A, T = bimodal()
    head = EMHead(Line(), 1, 1, 2, 0.1, ModelConfig(em_mstep_steps=200, lr=3e-3, seed=3))
    q = head.fit(S, A, T, 8)
    assert np.allclose(q.sum(axis=1), 1.0)
    assert head.weights.sum() == pytest.approx(1.0)
    probe = np.linspace(-0.8, 0.8, 9)[:, None]
    P = head.component_predictions(probe, np.zeros((9, 1), dtype=int))[:, :, 0] - probe[:, 0]
    hi, lo = P.max(axis=0), P.min(axis=0)
    assert np.abs(hi - 1).max() < 0.05 and np.abs(lo + 1).max() < 0.05
    assert np.all(np.abs(head.weights - 0.5) < 0.05)
    # sampling frequencies of the two modes
    rng = np.random.default_rng(1)
    draws = head.sample(np.zeros((10_000, 1)), np.zeros((10_000, 1), dtype=int), rng)[:, 0]
    assert abs((draws > 0).mean() - 0.5) < 0.03


def test_em_q_loglik_trace_monotone_soft():
    S, A, T = bimodal(300, 4)
    head = EMHead(Line(), 1, 1, 2, 0.1, ModelConfig(em_mstep_steps=100, lr=3e-3, seed=3))
    head.fit(S, A, T, 5)
    tr = head.qll_trace
    assert all(b >= a - 0.01 * abs(a) for a, b in zip(tr[1:], tr[2:])) or head.flags


def test_em_validation():
    with pytest.raises(ValueError):
        EMHead(Line(), 1, 1, 0, 0.1, ModelConfig())
    with pytest.raises(ValueError):
        EMHead(Line(), 1, 1, 2, 0.0, ModelConfig())
    with pytest.raises(ValueError):
        EMHead(Line(), 1, 1, 2, 0.1, ModelConfig()).sample(np.zeros((1, 1)),
                                                          np.zeros((1, 1), dtype=int),
                                                          np.random.default_rng(0))


def test_em_sample_single_component_and_seeded():
    grid = GridWorld()
    eps = [run_episode(grid, random_policy(4), np.random.default_rng(i)) for i in range(5)]
    data = build_dataset(eps, 1)
    em = EMModel(grid, 1, ModelConfig(em_mstep_steps=20, em_iters=2), M=1)
    em.fit(data)
    s = [0, 0, 2, 2]
    draws = {tuple(em_sample(em, s, [0], np.random.default_rng(k))) for k in range(5)}
    assert len(draws) == 1
    em2 = EMModel(grid, 1, ModelConfig(em_mstep_steps=20, em_iters=2), M=2)
    em2.heads[1] = em_fit(data, grid, 1, 2, 2, 0.5, ModelConfig(em_mstep_steps=20))
    a = [em_sample(em2, s, [0], np.random.default_rng(7)) for _ in range(3)]
    b = [em_sample(em2, s, [0], np.random.default_rng(7)) for _ in range(3)]
    assert np.array_equal(a, b)


def test_em_save_load(tmp_path):
    grid = GridWorld()
    eps = [run_episode(grid, random_policy(4), np.random.default_rng(i)) for i in range(4)]
    em = EMModel(grid, 2, ModelConfig(em_mstep_steps=10, em_iters=1), M=2)
    em.fit(build_dataset(eps, 2))
    save_model(em, tmp_path / "em.json")
    back = load_model(tmp_path / "em.json")
    S = grid.all_states()[:10]
    A = np.zeros((10, 2), dtype=int)
    assert np.array_equal(back.heads[2].component_predictions(S, A),
                          em.heads[2].component_predictions(S, A))
    assert np.array_equal(back.heads[2].weights, em.heads[2].weights)
