"""Index-selection policy: MDP types, MPNN policy net, REINFORCE, training."""

import itertools
import json
import math

import numpy as np
import pytest

from mrfact import mmf
from mrfact.baselines import greedy_mmf
from mrfact.errors import (
    DimensionError,
    InfeasibleStateError,
    InvariantError,
    SchemaError,
    TrainingDivergenceError,
)
from mrfact.graphgen import karate_graph, normalized_laplacian
from mrfact.matcore import IndexSet, SymMatrix, core_diagonal_projection
from mrfact.mmf import Factorization, MmfConfig
from mrfact.rlpolicy import (
    MdpAction,
    MdpState,
    PolicyParams,
    TrainConfig,
    Trajectory,
    action_log_prob,
    closed_form_rotations,
    gumbel_argmax_sample,
    init_policy,
    load_policy,
    mpnn_embed,
    pivot_distribution,
    reinforce_update,
    returns,
    rewards_for_trajectory,
    sample_action,
    save_policy,
    train,
    uniform_valid_action,
    write_trace_csv,
)

# chi-square critical value, df=2, upper tail 0.001
_CHI2_CRIT_DF2 = 13.815510557964274


def random_sym(n, rng):
    m = rng.standard_normal((n, n))
    return SymMatrix((m + m.T) / 2.0)


def make_state(a, dropped=(), drop_size=1):
    n = a.n
    active = IndexSet.full(n)
    if dropped:
        active = active.minus(IndexSet(dropped, n))
    return MdpState(len(dropped) // drop_size, active, a, drop_size)


def mpnn_oracle(block, weights):
    """Dense per-node recurrence, written without matrix products."""
    m = block.shape[0]
    msgs = np.ones((m, weights[0].shape[0]))
    outs = []
    for w in weights:
        agg = np.zeros_like(msgs)
        for i in range(m):
            for j in range(m):
                agg[i] += block[i, j] * msgs[j]
        z = agg @ w
        msgs = np.where(z > 0.0, z, 0.0)
        outs.append(msgs)
    return np.hstack(outs)


def flat_grads(grads):
    return np.concatenate([g.ravel() for g in grads])


def params_with(arrays_p, arrays_c):
    return PolicyParams([np.array(w) for w in arrays_p], [np.array(w) for w in arrays_c])


# ---------------------------------------------------------------- parameters


def test_init_policy_shapes_and_bounds():
    params = init_policy(np.random.default_rng(0), depth=4, hidden=10)
    for half in (params.pivot_net, params.companion_net):
        assert len(half) == 4
        assert half[0].shape == (1, 10)
        for w in half[1:]:
            assert w.shape == (10, 10)
    s0 = math.sqrt(6.0 / (1 + 10))
    st = math.sqrt(6.0 / (10 + 10))
    assert np.max(np.abs(params.pivot_net[0])) <= s0
    assert np.max(np.abs(params.pivot_net[2])) <= st
    # the two halves are drawn from one stream, so they must differ
    assert not np.array_equal(params.pivot_net[1], params.companion_net[1])


def test_init_policy_deterministic():
    a = init_policy(np.random.default_rng(3))
    b = init_policy(np.random.default_rng(3))
    for wa, wb in zip(a.pivot_net + a.companion_net, b.pivot_net + b.companion_net):
        assert np.array_equal(wa, wb)


def test_policy_params_rejects_shape_break():
    w0 = np.zeros((1, 4))
    good = np.zeros((4, 4))
    bad = np.zeros((3, 4))
    with pytest.raises(DimensionError):
        params_with([w0, bad], [w0, good])
    with pytest.raises(DimensionError):
        params_with([w0, good], [w0, np.zeros((4, 5))])
    # halves must agree in shape
    with pytest.raises(DimensionError):
        params_with([w0, good], [np.zeros((2, 4)), good])


def test_policy_params_rejects_non_finite():
    w0 = np.zeros((1, 4))
    w1 = np.zeros((4, 4))
    w1_bad = w1.copy()
    w1_bad[2, 2] = np.nan
    with pytest.raises(InvariantError):
        params_with([w0, w1_bad], [w0, w1])


def test_policy_params_arrays_read_only():
    params = init_policy(np.random.default_rng(1), depth=2, hidden=3)
    with pytest.raises(ValueError):
        params.pivot_net[0][0, 0] = 7.0


# ----------------------------------------------------------------- embedding


def test_embed_zero_weights_zero_output():
    a = random_sym(6, np.random.default_rng(0))
    weights = (np.zeros((1, 5)), np.zeros((5, 5)))
    m = mpnn_embed(a, IndexSet.full(6), weights)
    assert m.shape == (6, 10)
    assert np.all(m == 0.0)


def test_embed_matches_dense_recurrence():
    rng = np.random.default_rng(5)
    a = random_sym(7, rng)
    active = IndexSet((0, 2, 3, 6), 7)
    params = init_policy(rng, depth=3, hidden=5)
    got = mpnn_embed(a, active, params.pivot_net)
    block = a.a[np.ix_(active.as_array(), active.as_array())]
    want = mpnn_oracle(block, params.pivot_net)
    assert got.shape == (4, 15)
    assert np.allclose(got, want, rtol=0.0, atol=1e-12)


def test_embed_identity_block_no_mixing():
    # identity on the active block, garbage outside: inactive rows and
    # columns must not leak into the messages
    n = 6
    arr = np.full((n, n), 9.0)
    active = IndexSet((1, 3, 4), n)
    idx = active.as_array()
    arr[np.ix_(idx, idx)] = np.eye(3)
    a = SymMatrix(arr)
    params = init_policy(np.random.default_rng(2), depth=3, hidden=4)
    got = mpnn_embed(a, active, params.companion_net)
    msgs = np.ones((3, 1))
    cols = []
    for w in params.companion_net:
        msgs = np.maximum(msgs @ w, 0.0)
        cols.append(msgs)
    assert np.allclose(got, np.hstack(cols), rtol=0.0, atol=1e-12)


def test_embed_permutation_equivariance():
    rng = np.random.default_rng(11)
    a = random_sym(8, rng)
    params = init_policy(rng, depth=2, hidden=6)
    perm = rng.permutation(8)
    permuted = SymMatrix(a.a[np.ix_(perm, perm)])
    m_base = mpnn_embed(a, IndexSet.full(8), params.pivot_net)
    m_perm = mpnn_embed(permuted, IndexSet.full(8), params.pivot_net)
    # row i of the permuted embedding describes original node perm[i]
    assert np.allclose(m_perm, m_base[perm], rtol=0.0, atol=1e-12)


def test_embed_permutation_equivariance_on_subset():
    rng = np.random.default_rng(12)
    a = random_sym(7, rng)
    params = init_policy(rng, depth=2, hidden=4)
    active = IndexSet((0, 2, 5, 6), 7)
    # permute globally but keep the active set fixed as a set
    perm = np.array([2, 1, 6, 4, 3, 5, 0])
    permuted = SymMatrix(a.a[np.ix_(perm, perm)])
    m_base = mpnn_embed(a, active, params.pivot_net)
    m_perm = mpnn_embed(permuted, active, params.pivot_net)
    order = active.as_array()
    lookup = {g: r for r, g in enumerate(order)}
    rows = [lookup[perm[g]] for g in order]
    assert np.allclose(m_perm, m_base[rows], rtol=0.0, atol=1e-12)


def test_embed_rejects_inconsistent_weights():
    a = random_sym(4, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        mpnn_embed(a, IndexSet.full(4), (np.zeros((1, 3)), np.zeros((4, 3))))


# ------------------------------------------------------- pivot distribution


def test_pivot_uniform_for_equal_logits():
    p = pivot_distribution(np.ones((5, 7)))
    assert np.allclose(p, 0.2, rtol=0.0, atol=1e-12)


def test_pivot_closed_form_pair():
    m = np.array([[0.0], [math.log(2.0)]])
    p = pivot_distribution(m)
    assert abs(p[0] - 1.0 / 3.0) <= 1e-12
    assert abs(p[1] - 2.0 / 3.0) <= 1e-12


def test_pivot_shift_invariance():
    rng = np.random.default_rng(4)
    m = rng.standard_normal((9, 3))
    shifted = m + 1000.0 / 3.0  # adds 1000 to every row sum
    assert np.allclose(
        pivot_distribution(m), pivot_distribution(shifted), rtol=0.0, atol=1e-12
    )


def test_pivot_valid_distribution():
    rng = np.random.default_rng(6)
    m = rng.standard_normal((40, 8)) * 5.0
    p = pivot_distribution(m)
    assert np.all(p > 0.0)
    assert abs(p.sum() - 1.0) <= 1e-12


def test_pivot_survives_huge_logits():
    m = np.array([[0.0], [800.0]])
    p = pivot_distribution(m)
    assert np.all(np.isfinite(p))
    assert abs(p[1] - 1.0) <= 1e-12


def test_pivot_checks_active_length():
    with pytest.raises(DimensionError):
        pivot_distribution(np.ones((3, 2)), IndexSet.full(4))


# --------------------------------------------------------------- gumbel-max


def test_gumbel_degenerate_always_first():
    rng = np.random.default_rng(0)
    p = np.array([1.0, 0.0, 0.0])
    assert all(gumbel_argmax_sample(p, rng) == 0 for _ in range(200))


def test_gumbel_zero_prob_never_sampled():
    rng = np.random.default_rng(1)
    p = np.array([0.6, 0.0, 0.4])
    seen = {gumbel_argmax_sample(p, rng) for _ in range(20000)}
    assert 1 not in seen
    assert seen == {0, 2}


def test_gumbel_tv_against_target():
    rng = np.random.default_rng(7)
    p = np.array([0.2, 0.3, 0.5])
    counts = np.zeros(3)
    for _ in range(100000):
        counts[gumbel_argmax_sample(p, rng)] += 1
    tv = 0.5 * np.abs(counts / 100000 - p).sum()
    assert tv <= 0.01


def test_gumbel_matches_inverse_cdf_sampler():
    p = np.array([0.2, 0.3, 0.5])
    rng = np.random.default_rng(8)
    gumbel_counts = np.zeros(3)
    for _ in range(100000):
        gumbel_counts[gumbel_argmax_sample(p, rng)] += 1
    cdf_counts = np.bincount(
        np.searchsorted(np.cumsum(p), np.random.default_rng(9).random(100000)),
        minlength=3,
    ).astype(float)
    # two-sample chi-square against the pooled proportions
    stat = 0.0
    total = gumbel_counts + cdf_counts
    for i in range(3):
        expected = total[i] / 2.0
        stat += (gumbel_counts[i] - expected) ** 2 / expected
        stat += (cdf_counts[i] - expected) ** 2 / expected
    assert stat < _CHI2_CRIT_DF2


def test_gumbel_rejects_bad_distribution():
    rng = np.random.default_rng(0)
    with pytest.raises(InvariantError):
        gumbel_argmax_sample(np.array([0.5, 0.6]), rng)
    with pytest.raises(InvariantError):
        gumbel_argmax_sample(np.array([1.2, -0.2]), rng)


# ------------------------------------------------------------- domain types


def test_state_checks_active_count():
    a = random_sym(6, np.random.default_rng(0))
    MdpState(2, IndexSet((0, 1, 2, 3), 6), a, 1)
    with pytest.raises(InvariantError):
        MdpState(1, IndexSet((0, 1, 2, 3), 6), a, 1)
    with pytest.raises(InvariantError):
        MdpState(-1, IndexSet.full(6), a, 1)


def test_action_checks_nesting():
    MdpAction(IndexSet((1, 4), 6), IndexSet((4,), 6))
    with pytest.raises(InvariantError):
        MdpAction(IndexSet((1, 4), 6), IndexSet((2,), 6))
    with pytest.raises(DimensionError):
        MdpAction(IndexSet((1, 4), 6), IndexSet((4,), 7))


def test_action_checks_draw_order():
    MdpAction(IndexSet((1, 4, 5), 6), IndexSet((4,), 6), draw_order=(4, 5, 1))
    with pytest.raises(InvariantError):
        # order must start with the wavelet index
        MdpAction(IndexSet((1, 4, 5), 6), IndexSet((4,), 6), draw_order=(5, 4, 1))
    with pytest.raises(InvariantError):
        # order must cover the support exactly
        MdpAction(IndexSet((1, 4, 5), 6), IndexSet((4,), 6), draw_order=(4, 5, 5))


def test_trajectory_validates_chain_and_returns():
    a = random_sym(5, np.random.default_rng(0))
    s0 = make_state(a)
    s1 = make_state(a, dropped=(2,))
    a0 = MdpAction(IndexSet((2, 3), 5), IndexSet((2,), 5), draw_order=(2, 3))
    a1 = MdpAction(IndexSet((0, 4), 5), IndexSet((0,), 5), draw_order=(0, 4))
    rewards = (-1.0, -2.0)
    good = Trajectory((s0, s1), (a0, a1), (-0.5, -0.5), rewards, (-3.0, -2.0), 1.0)
    assert good.returns == (-3.0, -2.0)
    with pytest.raises(InvariantError):
        Trajectory((s0, s1), (a0, a1), (-0.5, -0.5), rewards, (-9.0, -2.0), 1.0)
    with pytest.raises(InvariantError):
        Trajectory((s0, s1), (a0,), (-0.5,), rewards, (-3.0, -2.0), 1.0)
    with pytest.raises(InvariantError):
        # second state does not follow from dropping the first wavelet
        s1_bad = make_state(a, dropped=(3,))
        Trajectory((s0, s1_bad), (a0, a1), (-0.5, -0.5), rewards, (-3.0, -2.0), 1.0)


# ------------------------------------------------------------ sample_action


def test_sample_action_validity_property():
    rng = np.random.default_rng(42)
    checked = 0
    for trial in range(120):
        n = int(rng.integers(5, 10))
        a = random_sym(n, rng)
        k = int(rng.integers(2, 5))
        params = init_policy(rng, depth=2, hidden=4)
        dropped = tuple(rng.choice(n, size=int(rng.integers(0, n - k + 1)), replace=False))
        state = make_state(a, dropped=dropped)
        for _ in range(9):
            action, logp = sample_action(a, state, params, rng, k)
            assert len(action.rotation_support) == k
            assert len(action.wavelet) == 1
            assert action.wavelet.issubset(action.rotation_support)
            assert action.rotation_support.issubset(state.active)
            assert np.isfinite(logp) and logp <= 1e-12
            assert action.draw_order[0] == action.wavelet.indices[0]
            assert tuple(sorted(action.draw_order)) == action.rotation_support.indices
            checked += 1
    assert checked >= 1000


def test_sample_action_two_wavelets():
    rng = np.random.default_rng(3)
    a = random_sym(7, rng)
    params = init_policy(rng, depth=2, hidden=4)
    state = MdpState(0, IndexSet.full(7), a, 2)
    action, logp = sample_action(a, state, params, rng, 4, c=2)
    assert len(action.wavelet) == 2
    assert action.wavelet.issubset(action.rotation_support)
    assert set(action.draw_order[:2]) == set(action.wavelet.indices)
    assert np.isfinite(logp)


def test_sample_action_infeasible_state():
    rng = np.random.default_rng(0)
    a = random_sym(5, rng)
    params = init_policy(rng, depth=2, hidden=3)
    state = make_state(a, dropped=(0, 1, 2))
    with pytest.raises(InfeasibleStateError):
        sample_action(a, state, params, rng, 3)


def test_sample_action_forced_companion_logp():
    rng = np.random.default_rng(1)
    a = random_sym(2, rng)
    params = init_policy(rng, depth=2, hidden=3)
    state = make_state(a)
    action, logp = sample_action(a, state, params, rng, 2)
    p = pivot_distribution(mpnn_embed(a, state.active, params.pivot_net))
    pivot_pos = state.active.indices.index(action.wavelet.indices[0])
    # the lone companion draw has probability one and adds nothing
    assert abs(logp - math.log(p[pivot_pos])) <= 1e-12


def test_sample_action_saturated_net_is_deterministic():
    arr = np.zeros((3, 3))
    np.fill_diagonal(arr, (3.0, 1.0, 2.0))
    a = SymMatrix(arr)
    big = [np.full((1, 1), 60.0)]
    params = params_with(big, big)
    state = make_state(a)
    seen = set()
    rng = np.random.default_rng(0)
    for _ in range(100):
        action, _ = sample_action(a, state, params, rng, 2)
        seen.add(action.draw_order)
    assert seen == {(0, 2)}


def test_sampled_logp_matches_recomputed():
    rng = np.random.default_rng(17)
    for _ in range(50):
        n = int(rng.integers(4, 8))
        a = random_sym(n, rng)
        params = init_policy(rng, depth=2, hidden=4)
        state = make_state(a)
        action, logp = sample_action(a, state, params, rng, 3)
        again, _, _ = action_log_prob(state, action, params)
        assert abs(logp - again) <= 1e-12


def test_enumerated_action_probabilities_sum_to_one():
    rng = np.random.default_rng(23)
    a = random_sym(4, rng)
    state = make_state(a)
    for k in (2, 3):
        params = init_policy(rng, depth=2, hidden=4)
        total = 0.0
        for pivot in range(4):
            rest = [i for i in range(4) if i != pivot]
            for comps in itertools.permutations(rest, k - 1):
                order = (pivot,) + comps
                action = MdpAction(
                    IndexSet(order, 4), IndexSet((pivot,), 4), draw_order=order
                )
                logp, _, _ = action_log_prob(state, action, params)
                total += math.exp(logp)
        assert abs(total - 1.0) <= 1e-9


def test_action_log_prob_needs_order_for_wide_rotations():
    rng = np.random.default_rng(2)
    a = random_sym(5, rng)
    params = init_policy(rng, depth=2, hidden=3)
    state = make_state(a)
    action = MdpAction(IndexSet((0, 2, 3), 5), IndexSet((2,), 5))
    with pytest.raises(InvariantError):
        action_log_prob(state, action, params)


def test_action_log_prob_derives_order_for_pairs():
    rng = np.random.default_rng(2)
    a = random_sym(5, rng)
    params = init_policy(rng, depth=2, hidden=3)
    state = make_state(a)
    bare = MdpAction(IndexSet((0, 2), 5), IndexSet((2,), 5))
    tagged = MdpAction(IndexSet((0, 2), 5), IndexSet((2,), 5), draw_order=(2, 0))
    assert action_log_prob(state, bare, params)[0] == pytest.approx(
        action_log_prob(state, tagged, params)[0], abs=1e-15
    )


def test_action_log_prob_gradient_matches_fd():
    rng = np.random.default_rng(31)
    a = random_sym(5, rng)
    params = init_policy(rng, depth=2, hidden=4)
    state = make_state(a)
    action, _ = sample_action(a, state, params, rng, 3)
    _, grads_p, grads_c = action_log_prob(state, action, params)

    h = 1e-5
    for half, grads in (("pivot", grads_p), ("companion", grads_c)):
        base = params.pivot_net if half == "pivot" else params.companion_net
        other = params.companion_net if half == "pivot" else params.pivot_net
        fd = [np.zeros_like(w) for w in base]
        for wi, w in enumerate(base):
            for pos in np.ndindex(w.shape):
                for sign in (1.0, -1.0):
                    bumped = [np.array(x) for x in base]
                    bumped[wi][pos] += sign * h
                    trial = (
                        params_with(bumped, other)
                        if half == "pivot"
                        else params_with(other, bumped)
                    )
                    val, _, _ = action_log_prob(state, action, trial)
                    fd[wi][pos] += sign * val / (2.0 * h)
        num = flat_grads(fd)
        ana = flat_grads(grads)
        assert np.linalg.norm(num - ana) <= 1e-4 * max(1.0, np.linalg.norm(ana))


# --------------------------------------------------------- rewards / returns


def test_returns_gamma_one():
    assert returns((1.0, 1.0, 1.0), 1.0) == (3.0, 2.0, 1.0)


def test_returns_discounted_hand_case():
    assert returns((0.0, 0.0, 8.0), 0.5) == (2.0, 4.0, 8.0)


def test_returns_last_is_final_reward():
    rng = np.random.default_rng(0)
    rewards = tuple(rng.standard_normal(6))
    for gamma in (0.3, 0.9, 1.0):
        assert returns(rewards, gamma)[-1] == rewards[-1]


def test_returns_matches_suffix_oracle():
    rng = np.random.default_rng(1)
    rewards = tuple(rng.standard_normal(7))
    gamma = 0.7
    got = returns(rewards, gamma)
    for ell in range(7):
        want = sum(gamma**k * rewards[ell + k] for k in range(7 - ell))
        assert abs(got[ell] - want) <= 1e-12


def test_returns_rejects_bad_gamma():
    with pytest.raises(InvariantError):
        returns((1.0,), 0.0)
    with pytest.raises(InvariantError):
        returns((1.0,), 1.5)


def _trajectory_states_actions(a, orders, drop_size=1):
    """States and actions for a hand-written sequence of draw orders."""
    n = a.n
    states, actions = [], []
    active = IndexSet.full(n)
    for lv, order in enumerate(orders):
        states.append(MdpState(lv, active, a, drop_size))
        wav = IndexSet(order[:drop_size], n)
        actions.append(MdpAction(IndexSet(order, n), wav, draw_order=tuple(order)))
        active = active.minus(wav)
    return states, actions


def test_rewards_diagonal_matrix_all_zero():
    arr = np.zeros((5, 5))
    np.fill_diagonal(arr, (4.0, 1.0, 3.0, 5.0, 2.0))
    a = SymMatrix(arr)
    states, actions = _trajectory_states_actions(a, [(1, 3), (4, 0)])
    rots = closed_form_rotations(a, actions)
    rewards = rewards_for_trajectory(a, states, actions, rots)
    assert len(rewards) == 2
    assert all(abs(r) <= 1e-12 for r in rewards)


def test_rewards_exact_pair_case():
    a = SymMatrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
    states, actions = _trajectory_states_actions(a, [(1, 0)])
    rots = closed_form_rotations(a, actions)
    rewards = rewards_for_trajectory(a, states, actions, rots)
    assert len(rewards) == 1
    assert abs(rewards[0]) <= 1e-9


def test_rewards_are_never_positive():
    rng = np.random.default_rng(3)
    a = random_sym(6, rng)
    states, actions = _trajectory_states_actions(a, [(0, 1, 2), (3, 4, 5)])
    rots = closed_form_rotations(a, actions)
    assert all(r <= 0.0 for r in rewards_for_trajectory(a, states, actions, rots))


def test_final_reward_matches_error_identity():
    rng = np.random.default_rng(9)
    a = random_sym(6, rng)
    states, actions = _trajectory_states_actions(a, [(5, 1, 3), (0, 2, 4)])
    rots = closed_form_rotations(a, actions)
    rewards = rewards_for_trajectory(a, states, actions, rots)
    transformed = mmf.apply_chain(a, rots, 2)
    s_l = IndexSet((1, 2, 3, 4), 6)  # wavelets 5 then 0 retired
    f = Factorization(
        n=6,
        k=3,
        c=1,
        rotations=rots,
        wavelet_sets=[ac.wavelet for ac in actions],
        core=core_diagonal_projection(transformed, s_l),
    )
    assert abs(rewards[-1] + math.sqrt(mmf.objective(a, f))) <= 1e-9


def test_intermediate_reward_uses_post_action_set():
    rng = np.random.default_rng(13)
    a = random_sym(5, rng)
    states, actions = _trajectory_states_actions(a, [(2, 0), (4, 1)])
    rots = closed_form_rotations(a, actions)
    rewards = rewards_for_trajectory(a, states, actions, rots)
    stage = mmf.apply_chain(a, rots, 1).copy_array()
    np.fill_diagonal(stage, 0.0)
    post = np.array([0, 1, 3, 4])  # index 2 dropped by the first action
    stage[np.ix_(post, post)] = 0.0
    assert abs(rewards[0] + float(np.sum(stage * stage))) <= 1e-12


def test_closed_form_rotations_align_wavelet_rows():
    # rotating [[2,1],[1,2]] must send the small-eigenvalue direction to
    # the dropped coordinate, leaving the kept row with the larger value
    a = SymMatrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
    _, actions = _trajectory_states_actions(a, [(1, 0)])
    (rot,) = closed_form_rotations(a, actions)
    rotated = mmf.apply_chain(a, [rot], 1)
    assert abs(rotated.a[0, 0] - 3.0) <= 1e-12
    assert abs(rotated.a[1, 1] - 1.0) <= 1e-12


def test_rewards_rejects_mismatched_rotations():
    rng = np.random.default_rng(4)
    a = random_sym(5, rng)
    states, actions = _trajectory_states_actions(a, [(2, 0), (4, 1)])
    rots = closed_form_rotations(a, actions)
    with pytest.raises(InvariantError):
        rewards_for_trajectory(a, states, actions, [rots[1], rots[0]])


# ----------------------------------------------------------------- REINFORCE


def _single_step_trajectory(a, params, rng, k=2, reward=-1.0):
    state = make_state(a)
    action, logp = sample_action(a, state, params, rng, k)
    return Trajectory((state,), (action,), (logp,), (reward,), (reward,), 1.0)


def test_reinforce_zero_returns_keep_params():
    rng = np.random.default_rng(0)
    a = random_sym(4, rng)
    params = init_policy(rng, depth=2, hidden=3)
    state = make_state(a)
    action, logp = sample_action(a, state, params, rng, 2)
    traj = Trajectory((state,), (action,), (logp,), (0.0,), (0.0,), 1.0)
    updated = reinforce_update(params, traj, 1e-3, 1.0)
    for wa, wb in zip(
        params.pivot_net + params.companion_net,
        updated.pivot_net + updated.companion_net,
    ):
        assert np.array_equal(wa, wb)


def test_reinforce_single_step_matches_manual():
    rng = np.random.default_rng(1)
    a = random_sym(4, rng)
    params = init_policy(rng, depth=2, hidden=3)
    traj = _single_step_trajectory(a, params, rng, reward=-2.5)
    _, gp, gc = action_log_prob(traj.states[0], traj.actions[0], params)
    updated = reinforce_update(params, traj, 1e-3, 1.0)
    for w, g, new in zip(params.pivot_net, gp, updated.pivot_net):
        assert np.allclose(new, w + 1e-3 * (-2.5) * g, rtol=0.0, atol=1e-15)
    for w, g, new in zip(params.companion_net, gc, updated.companion_net):
        assert np.allclose(new, w + 1e-3 * (-2.5) * g, rtol=0.0, atol=1e-15)


def test_reinforce_updates_steps_in_sequence():
    # the second step's score gradient is taken at the parameters already
    # moved by the first step, exactly as the update rule iterates
    rng = np.random.default_rng(2)
    a = random_sym(5, rng)
    params = init_policy(rng, depth=2, hidden=3)
    s0 = make_state(a)
    a0, lp0 = sample_action(a, s0, params, rng, 2)
    s1 = MdpState(1, s0.active.minus(a0.wavelet), a, 1)
    a1, lp1 = sample_action(a, s1, params, rng, 2)
    gamma = 0.5
    rewards = (-1.0, -3.0)
    traj = Trajectory((s0, s1), (a0, a1), (lp0, lp1), rewards, returns(rewards, gamma), gamma)
    updated = reinforce_update(params, traj, 1e-2, gamma)

    g = returns(rewards, gamma)
    _, gp, gc = action_log_prob(s0, a0, params)
    mid_p = [w + 1e-2 * g[0] * d for w, d in zip(params.pivot_net, gp)]
    mid_c = [w + 1e-2 * g[0] * d for w, d in zip(params.companion_net, gc)]
    mid = params_with(mid_p, mid_c)
    _, gp1, gc1 = action_log_prob(s1, a1, mid)
    want_p = [w + 1e-2 * gamma * g[1] * d for w, d in zip(mid.pivot_net, gp1)]
    want_c = [w + 1e-2 * gamma * g[1] * d for w, d in zip(mid.companion_net, gc1)]
    for got, want in zip(updated.pivot_net + updated.companion_net, want_p + want_c):
        assert np.allclose(got, want, rtol=0.0, atol=1e-15)


def test_reinforce_skips_fallback_steps():
    rng = np.random.default_rng(3)
    a = random_sym(4, rng)
    params = init_policy(rng, depth=2, hidden=3)
    state = make_state(a)
    action = uniform_valid_action(state, 2, 1, rng)
    traj = Trajectory((state,), (action,), (float("nan"),), (-1.0,), (-1.0,), 1.0)
    updated = reinforce_update(params, traj, 1e-3, 1.0)
    for wa, wb in zip(params.pivot_net, updated.pivot_net):
        assert np.array_equal(wa, wb)


def test_reinforce_divergence_error():
    rng = np.random.default_rng(4)
    a = random_sym(4, rng)
    params = init_policy(rng, depth=2, hidden=3)
    traj = _single_step_trajectory(a, params, rng)
    blown = params_with(
        [w * 1e200 for w in params.pivot_net],
        [np.array(w) for w in params.companion_net],
    )
    with pytest.raises(TrainingDivergenceError):
        reinforce_update(blown, traj, 1e-3, 1.0)


def test_reinforce_bandit_matches_enumeration():
    # two-armed bandit: n=2, k=2 makes the companion forced, so the only
    # decision is the pivot; exact policy gradient is a two-term sum
    a = SymMatrix(np.array([[1.0, 0.5], [0.5, 2.0]]))
    params = params_with([np.full((1, 1), 0.3)], [np.full((1, 1), 0.2)])
    state = make_state(a)
    arm_reward = {0: 1.0, 1: 3.0}

    per_arm = {}
    for arm in (0, 1):
        order = (arm, 1 - arm)
        action = MdpAction(IndexSet(order, 2), IndexSet((arm,), 2), draw_order=order)
        logp, gp, gc = action_log_prob(state, action, params)
        per_arm[arm] = (math.exp(logp), flat_grads(gp), flat_grads(gc))
    prob_sum = per_arm[0][0] + per_arm[1][0]
    assert abs(prob_sum - 1.0) <= 1e-12
    exact_p = sum(p * arm_reward[arm] * g for arm, (p, g, _) in per_arm.items())
    exact_c = sum(p * arm_reward[arm] * g for arm, (p, _, g) in per_arm.items())
    assert np.linalg.norm(exact_c) <= 1e-15  # forced choice carries no score

    rng = np.random.default_rng(77)
    est_p = np.zeros_like(exact_p)
    episodes = 100000
    for _ in range(episodes):
        action, _ = sample_action(a, state, params, rng, 2)
        arm = action.wavelet.indices[0]
        est_p += arm_reward[arm] * per_arm[arm][1]
    est_p /= episodes
    assert np.linalg.norm(est_p - exact_p) <= 0.05 * np.linalg.norm(exact_p)


def test_score_function_has_zero_mean():
    rng = np.random.default_rng(55)
    a = random_sym(4, rng)
    params = init_policy(rng, depth=2, hidden=3)
    state = make_state(a)

    cache = {}
    samples = 100000
    sums = None
    sq_sums = None
    for _ in range(samples):
        action, _ = sample_action(a, state, params, rng, 3)
        key = action.draw_order
        if key not in cache:
            _, gp, gc = action_log_prob(state, action, params)
            cache[key] = np.concatenate([flat_grads(gp), flat_grads(gc)])
        g = cache[key]
        if sums is None:
            sums = g.copy()
            sq_sums = g * g
        else:
            sums += g
            sq_sums += g * g
    mean = sums / samples
    var = sq_sums / samples - mean * mean
    se = np.sqrt(np.maximum(var, 0.0) / samples)
    assert np.all(np.abs(mean) <= 3.0 * se + 1e-12)


# ------------------------------------------------------------------ training


def test_uniform_valid_action_properties():
    rng = np.random.default_rng(0)
    a = random_sym(7, rng)
    state = make_state(a, dropped=(1, 5))
    pivots = set()
    for _ in range(500):
        action = uniform_valid_action(state, 3, 1, rng)
        assert len(action.rotation_support) == 3
        assert action.wavelet.issubset(action.rotation_support)
        assert action.rotation_support.issubset(state.active)
        pivots.add(action.wavelet.indices[0])
    assert pivots == set(state.active.indices)


def test_train_config_validation():
    cfg = MmfConfig(levels=2, k=2)
    with pytest.raises(ValueError):
        TrainConfig(mmf=cfg, gamma=0.0)
    with pytest.raises(ValueError):
        TrainConfig(mmf=cfg, gamma=1.2)
    with pytest.raises(ValueError):
        TrainConfig(mmf=cfg, eta=0.0)
    with pytest.raises(ValueError):
        TrainConfig(mmf=cfg, omega=0)
    with pytest.raises(ValueError):
        TrainConfig(mmf=cfg, episodes=0)


def test_train_shrinks_rotation_order_at_tail():
    # deep sweeps run out of active indices before the requested order;
    # the tail levels fall back to rotations over whatever remains
    arr = np.zeros((4, 4))
    np.fill_diagonal(arr, (1.0, 2.0, 3.0, 4.0))
    a = SymMatrix(arr)
    cfg = TrainConfig(mmf=MmfConfig(levels=3, k=3), episodes=2)
    result = train(a, cfg)
    orders = [len(rot.support) for rot in result.factorization.rotations]
    assert orders == [3, 3, 2]
    assert len(result.factorization.active_sets[-1]) == 1


def test_train_diagonal_matrix_reaches_zero():
    arr = np.zeros((5, 5))
    np.fill_diagonal(arr, (5.0, 1.0, 3.0, 2.0, 4.0))
    a = SymMatrix(arr)
    cfg = TrainConfig(mmf=MmfConfig(levels=2, k=2, seed=0), episodes=6)
    result = train(a, cfg)
    assert result.final_error <= 1e-9
    assert result.episodes_run == 6
    assert len(result.trace) == 6
    assert result.invalid_actions == 0
    best = [row[2] for row in result.trace]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    assert abs(math.sqrt(mmf.objective(a, result.factorization)) - result.final_error) <= 1e-12


def test_train_trace_is_deterministic():
    rng = np.random.default_rng(21)
    a = random_sym(6, rng)
    cfg = TrainConfig(mmf=MmfConfig(levels=2, k=3, seed=5), episodes=8)
    first = train(a, cfg)
    second = train(a, cfg)
    assert first.trace == second.trace
    assert first.final_error == second.final_error
    for wa, wb in zip(
        first.params.pivot_net + first.params.companion_net,
        second.params.pivot_net + second.params.companion_net,
    ):
        assert np.array_equal(wa, wb)


def test_train_polish_never_hurts():
    rng = np.random.default_rng(33)
    a = random_sym(7, rng)
    base = MmfConfig(levels=3, k=3, seed=2)
    raw = train(a, TrainConfig(mmf=base, episodes=10, polish_final=False))
    polished = train(a, TrainConfig(mmf=base, episodes=10))
    assert raw.trace == polished.trace
    assert polished.final_error <= raw.final_error + 1e-12


def test_train_early_stops_on_rising_window():
    rng = np.random.default_rng(8)
    a = random_sym(6, rng)
    cfg = TrainConfig(mmf=MmfConfig(levels=2, k=2, seed=1), episodes=400, omega=2)
    result = train(a, cfg)
    assert result.stopped_early
    assert result.episodes_run < 400
    assert len(result.trace) == result.episodes_run
    means = [row[3] for row in result.trace]
    assert means[-1] > means[-2]


def test_train_trace_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    a = random_sym(5, rng)
    cfg = TrainConfig(mmf=MmfConfig(levels=2, k=2, seed=3), episodes=5)
    result = train(a, cfg)
    path = tmp_path / "trace.csv"
    write_trace_csv(result.trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "episode,final_error,best_error,mean_window_error"
    assert len(lines) == 6
    for row, line in zip(result.trace, lines[1:]):
        cells = line.split(",")
        assert int(cells[0]) == row[0]
        for want, cell in zip(row[1:], cells[1:]):
            assert float(cell) == want


def test_policy_checkpoint_round_trip(tmp_path):
    params = init_policy(np.random.default_rng(6))
    path = tmp_path / "policy.json"
    save_policy(params, path)
    loaded = load_policy(path)
    for wa, wb in zip(
        params.pivot_net + params.companion_net,
        loaded.pivot_net + loaded.companion_net,
    ):
        assert np.array_equal(wa, wb)


def test_policy_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(SchemaError):
        load_policy(path)
    path.write_text(json.dumps({"format": "other", "version": 1}))
    with pytest.raises(SchemaError):
        load_policy(path)
    doc = {
        "format": "mrfact-policy",
        "version": 1,
        "pivot_net": [[[0.0, 1.0]]],
        "companion_net": [[[0.0]]],
    }
    path.write_text(json.dumps(doc))
    with pytest.raises(DimensionError):
        load_policy(path)


def test_train_beats_greedy_on_karate():
    lap = normalized_laplacian(karate_graph())
    d_l = 8
    levels = lap.n - d_l
    cfg = TrainConfig(mmf=MmfConfig(levels=levels, k=8, seed=0), episodes=12, eta=1e-5)
    result = train(lap, cfg)
    greedy_err = math.sqrt(mmf.objective(lap, greedy_mmf(lap, levels)))
    assert result.final_error <= greedy_err
    assert result.factorization.levels == levels
    assert len(result.factorization.active_sets[-1]) == d_l
