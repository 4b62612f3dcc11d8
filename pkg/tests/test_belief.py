import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from olfactory_pursuit.belief import (
    BeliefCollapse,
    ModelContradiction,
    bayes_update,
    capture_cells,
    entropy,
    expected_entropies,
    expected_entropy_after,
    initial_belief,
    predict,
    to_agent_frame,
    uniform_belief,
    zero_capture_and_renormalize,
)
from olfactory_pursuit.grid import ACTIONS, D4, GridSpec, transform_field
from olfactory_pursuit.odor import DetectionModel, Observation, likelihood_table
from olfactory_pursuit.target import (
    FIVE_STATE,
    DiscreteRTParams,
    TransitionMatrix,
    discrete_transition_matrix,
    invariant_distribution,
)

G7 = GridSpec(7)
M7 = DetectionModel(lam=1.5, rate=1.0, tau_d=9.0)
T7 = likelihood_table(M7, G7)
P5 = discrete_transition_matrix(DiscreteRTParams.from_persistence(3.0))
Q5 = invariant_distribution(P5)


def random_belief(rng, K=5, L=7, zeros=0.0):
    b = rng.random((K, L, L))
    if zeros:
        b[rng.random(b.shape) < zeros] = 0.0
    return b / b.sum()


# ---------------------------------------------------------------- initial belief

def test_initial_belief_structure():
    agent = (3, 3)
    b = initial_belief(agent, T7, Q5, G7)
    assert b.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(b.sum(axis=(1, 2)), Q5, rtol=0, atol=1e-15)
    ci, cj = capture_cells(agent, G7)
    assert b[:, ci, cj].sum() == 0.0
    pos = b.sum(axis=0)
    for g in D4:
        assert np.allclose(transform_field(to_agent_frame(pos, agent), g), to_agent_frame(pos, agent))
    with pytest.raises(ValueError):
        initial_belief(agent, T7, Q5 * 2, G7)


# ---------------------------------------------------------------- predict

def test_predict_ballistic_and_rest():
    ident = TransitionMatrix(np.eye(5), FIVE_STATE)
    b = np.zeros((5, 7, 7))
    b[0, 2, 3] = 1.0
    out = predict(b, ident)
    assert out[0, 3, 3] == 1.0 and out.sum() == 1.0
    b = np.zeros((5, 7, 7))
    b[4, 2, 3] = 1.0
    out = predict(b, P5)
    assert out.sum(axis=0)[2, 3] == pytest.approx(1.0, abs=1e-15)
    # periodic
    b = np.zeros((5, 7, 7))
    b[1, 0, 0] = 1.0
    assert predict(b, ident)[1, 6, 0] == 1.0


def test_predict_keeps_stationary_joint():
    b = Q5[:, None, None] * np.full((7, 7), 1 / 49)[None]
    assert np.max(np.abs(predict(b, P5) - b)) < 1e-16


def test_predict_rejects_mismatched_alphabet():
    with pytest.raises(ValueError):
        predict(np.ones((3, 7, 7)), P5)


# ---------------------------------------------------------------- zero capture

def test_zero_capture_examples(rng):
    agent = (3, 3)
    b = random_belief(rng)
    ci, cj = capture_cells(agent, G7)
    b[:, ci, cj] = 0.0
    b /= b.sum()
    out, pf = zero_capture_and_renormalize(b, agent, G7)
    assert pf == 0.0 and np.allclose(out, b, rtol=0, atol=1e-16)

    u = np.full((5, 7, 7), 1 / 245)
    out, pf = zero_capture_and_renormalize(u, agent, G7)
    assert pf == pytest.approx(45 / 245, rel=1e-14)
    again, pf2 = zero_capture_and_renormalize(out, agent, G7)
    assert pf2 == 0.0 and np.array_equal(again, out)


def test_zero_capture_collapse():
    b = np.zeros((5, 7, 7))
    b[2, 4, 4] = 1.0
    with pytest.raises(BeliefCollapse):
        zero_capture_and_renormalize(b, (3, 3), G7)
    b[2, 0, 0] = 1e-13
    with pytest.raises(BeliefCollapse):
        zero_capture_and_renormalize(b / b.sum(), (3, 3), G7)


# ---------------------------------------------------------------- bayes update

def test_bayes_flat_likelihood_and_point_mass(rng):
    b = random_belief(rng)
    flat = np.full((7, 7), 0.3)
    for obs in (Observation.DETECTION, Observation.NO_DETECTION):
        post, p = bayes_update(b, obs, (1, 2), flat, G7)
        assert np.allclose(post, b, rtol=0, atol=1e-16)
    pm = np.zeros((5, 7, 7))
    pm[3, 5, 1] = 1.0
    for obs in (Observation.DETECTION, Observation.NO_DETECTION):
        post, _ = bayes_update(pm, obs, (1, 2), T7, G7)
        assert post[3, 5, 1] == 1.0 and post.sum() == 1.0
    with pytest.raises(ValueError):
        bayes_update(b, Observation.FOUND, (0, 0), T7, G7)


def test_bayes_dense_recomputation(rng):
    for _ in range(20):
        b = random_belief(rng)
        agent = tuple(rng.integers(0, 7, 2))
        obs = Observation.DETECTION if rng.random() < 0.5 else Observation.NO_DETECTION
        ref = np.empty_like(b)
        for u, i, j in itertools.product(range(5), range(7), range(7)):
            d = ((agent[0] - i) % 7, (agent[1] - j) % 7)
            ly = T7[d]
            ref[u, i, j] = b[u, i, j] * (ly if obs == Observation.DETECTION else 1 - ly)
        z = ref.sum()
        post, p = bayes_update(b, obs, agent, T7, G7)
        assert np.max(np.abs(post - ref / z)) < 1e-14
        assert p == pytest.approx(z, rel=1e-13)


def test_bayes_contradiction():
    b = np.zeros((5, 7, 7))
    b[0, 0, 0] = 1.0
    lik = np.zeros((7, 7))
    with pytest.raises(ModelContradiction):
        bayes_update(b, Observation.DETECTION, (3, 3), lik, G7)


# ---------------------------------------------------------------- entropy

def test_entropy_examples(rng):
    pm = np.zeros((5, 7, 7))
    pm[0, 0, 0] = 1.0
    assert entropy(pm) == 0.0
    assert entropy(np.full((5, 7, 7), 1 / 245)) == pytest.approx(math.log2(245), rel=1e-14)
    pos = rng.random((7, 7))
    pos /= pos.sum()
    prod = Q5[:, None, None] * pos[None]
    h = lambda p: -np.sum(p[p > 0] * np.log2(p[p > 0]))
    assert entropy(prod) == pytest.approx(h(pos) + h(Q5), rel=1e-13)


# ---------------------------------------------------------------- expected entropy

def _expected_entropy_oracle(b, action, agent, table, L):
    y = ((agent[0] + action[0]) % L, (agent[1] + action[1]) % L)
    total = b.sum()
    p_found, p_yes, p_no = 0.0, 0.0, 0.0
    w_yes, w_no = np.zeros_like(b), np.zeros_like(b)
    for u, i, j in itertools.product(range(b.shape[0]), range(L), range(L)):
        dx, dy = (y[0] - i) % L, (y[1] - j) % L
        dx, dy = min(dx, L - dx), min(dy, L - dy)
        v = b[u, i, j] / total
        if dx * dx + dy * dy <= 2:
            p_found += v
            continue
        ly = table[(y[0] - i) % L, (y[1] - j) % L]
        w_yes[u, i, j] = v * ly
        w_no[u, i, j] = v * (1 - ly)
    out = 0.0
    for w in (w_yes, w_no):
        p = w.sum()
        if p > 0:
            q = w[w > 0] / p
            out += p * -np.sum(q * np.log2(q))
    return out


def test_expected_entropy_oracle(rng):
    for _ in range(10):
        b = random_belief(rng, zeros=0.3)
        agent = tuple(int(v) for v in rng.integers(0, 7, 2))
        for a in ACTIONS:
            ref = _expected_entropy_oracle(b, a, agent, T7, 7)
            assert expected_entropy_after(b, a, agent, T7, G7) == pytest.approx(ref, abs=1e-12)


def test_expected_entropy_trivial_cases():
    pm = np.zeros((5, 7, 7))
    pm[1, 0, 5] = 1.0
    assert np.all(expected_entropies(pm, (3, 3), T7, G7) == 0.0)
    inside = np.zeros((5, 7, 7))
    inside[:, 4, 3] = 0.2  # capture cell of agent + e1
    assert expected_entropy_after(inside, (1, 0), (3, 3), T7, G7) == 0.0


def test_expected_posterior_entropy_not_above_prior(rng):
    for _ in range(50):
        b = random_belief(rng, zeros=0.5)
        agent = tuple(int(v) for v in rng.integers(0, 7, 2))
        h0 = entropy(b)
        assert np.all(expected_entropies(b, agent, T7, G7) <= h0 + 1e-12)


# ---------------------------------------------------------------- invariants

def _random_operations(n_ops, seed):
    """Apply random predict / move+zero / update operations; return the worst violations."""
    rng = np.random.default_rng(seed)
    b = uniform_belief((3, 3), Q5, G7)
    agent = np.array([3, 3])
    worst_sum, worst_min, worst_cap = 0.0, 0.0, 0.0
    for _ in range(n_ops):
        op = rng.integers(0, 3)
        if op == 0:
            b = predict(b, P5)
        elif op == 1:
            agent = (agent + ACTIONS[rng.integers(0, 4)]) % 7
            try:
                b, pf = zero_capture_and_renormalize(b, agent, G7)
            except BeliefCollapse:
                b, pf = uniform_belief(agent, Q5, G7), 0.0
            assert 0 <= pf < 1
            ci, cj = capture_cells(agent, G7)
            worst_cap = max(worst_cap, b[:, ci, cj].sum())
        else:
            obs = Observation.DETECTION if rng.random() < 0.2 else Observation.NO_DETECTION
            b, p = bayes_update(b, obs, agent, T7, G7)
            assert 0 < p <= 1
        worst_sum = max(worst_sum, abs(b.sum() - 1))
        worst_min = min(worst_min, b.min())
    return worst_sum, worst_min, worst_cap


def test_random_operation_sequences_keep_invariants():
    worst_sum, worst_min, worst_cap = _random_operations(100_000, 7)
    assert worst_sum < 1e-12
    assert worst_min >= 0.0
    assert worst_cap == 0.0


# ---------------------------------------------------------------- filter oracle

def _enumerated_posterior(b0, P, agents, observations, table, L, n_steps):
    """Weight every target history explicitly and marginalize onto the final state."""
    A = P.alphabet
    K = len(A)
    seqs = np.array(list(itertools.product(range(K), repeat=n_steps + 1)))  # u_0 .. u_T
    x0 = np.array(list(itertools.product(range(L), range(L))))
    # weight[s, x]
    w = b0[seqs[:, 0][:, None], x0[None, :, 0], x0[None, :, 1]].copy()
    pos = np.broadcast_to(x0[None], (len(seqs), len(x0), 2)).copy()
    for t in range(n_steps):
        w *= P.matrix[seqs[:, t + 1], seqs[:, t]][:, None]
        pos = (pos + A[seqs[:, t]][:, None, :]) % L
        agent = agents[t]
        d = (agent - pos) % L
        dm = np.minimum(d, L - d)
        w *= (dm ** 2).sum(-1) > 2
        ly = table[d[..., 0], d[..., 1]]
        w *= ly if observations[t] == Observation.DETECTION else 1 - ly
    out = np.zeros_like(b0)
    np.add.at(out, (np.broadcast_to(seqs[:, -1][:, None], w.shape), pos[..., 0], pos[..., 1]), w)
    return out / out.sum()


def _filter_and_oracle(P, n_steps, seed):
    rng = np.random.default_rng(seed)
    K = P.size
    b0 = random_belief(rng, K)
    # agent walks a fixed path; observations drawn from a hidden true target
    agent = np.array([0, 0])
    target = np.array([3, 4])
    u = rng.integers(0, K)
    agents, observations = [], []
    b = b0
    for _ in range(n_steps):
        b = predict(b, P)
        target = (target + P.alphabet[u]) % 7
        u = P.sample(u, rng)
        agent = (agent + ACTIONS[rng.integers(0, 4)]) % 7
        b, _ = zero_capture_and_renormalize(b, agent, G7)
        d = tuple((agent - target) % 7)
        ly = T7[d] if d != (0, 0) else 0.0
        obs = Observation.DETECTION if rng.random() < ly else Observation.NO_DETECTION
        b, _ = bayes_update(b, obs, agent, T7, G7)
        agents.append(agent.copy())
        observations.append(obs)
    return b, _enumerated_posterior(b0, P, agents, observations, T7, 7, n_steps)


@pytest.mark.parametrize("seed", [0, 1])
def test_filter_matches_history_enumeration_ten_steps(seed):
    alphabet = np.array([[1, 0], [0, 1], [0, 0]])
    P = TransitionMatrix(np.array([[0.6, 0.1, 0.2], [0.1, 0.7, 0.3], [0.3, 0.2, 0.5]]), alphabet)
    b, ref = _filter_and_oracle(P, 10, seed)
    assert np.max(np.abs(b - ref)) < 1e-10


def test_filter_matches_history_enumeration_five_state():
    b, ref = _filter_and_oracle(P5, 5, 3)
    assert np.max(np.abs(b - ref)) < 1e-10


@given(st.integers(0, 6), st.integers(0, 6))
def test_agent_frame_is_involution(i, j):
    b = np.arange(5 * 49, dtype=float).reshape(5, 7, 7)
    assert np.array_equal(to_agent_frame(to_agent_frame(b, (i, j)), (i, j)), b)
