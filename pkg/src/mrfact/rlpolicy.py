"""Learned index selection for the rotation chain.

The combinatorial half of the factorization problem (which rows to
rotate, which to retire) is cast as an episodic decision process: a
state is the still-active index set, an action picks a rotation support
plus the wavelet rows to drop, and the reward is the negative residual.
Two small message-passing networks score the choices: one proposes the
pivot row, the other scores companions by embedding similarity.  Both
are trained with the plain score-function estimator, rewards coming
from closed-form rotations during the search and from manifold
optimization as a final polish.
"""

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from mrfact import _kern
from mrfact.errors import (
    DimensionError,
    InfeasibleStateError,
    InvariantError,
    NumericalError,
    SchemaError,
    TrainingDivergenceError,
)
from mrfact.matcore import (
    IndexSet,
    Rotation,
    SymMatrix,
    core_diagonal_projection,
    residual_norm_sq,
)
from mrfact.mmf import (
    Factorization,
    MmfConfig,
    apply_chain,
    closed_form_core,
    objective,
    optimize_rotations,
    reconstruct,
)

_POLICY_TAG = "mrfact-policy"
_POLICY_VERSION = 1


def _freeze_net(weights, label):
    """Validate one network half and return immutable float64 copies."""
    ws = []
    for t, w in enumerate(weights):
        arr = np.array(w, dtype=np.float64, order="C")
        if arr.ndim != 2:
            raise DimensionError(f"{label} weight {t} is not a matrix")
        ws.append(arr)
    if not ws:
        raise DimensionError(f"{label} network needs at least one weight matrix")
    hidden = ws[0].shape[1]
    for t, w in enumerate(ws[1:], start=1):
        if w.shape != (hidden, hidden):
            raise DimensionError(
                f"{label} weight {t} is {w.shape}, expected ({hidden}, {hidden})"
            )
    for t, w in enumerate(ws):
        if not np.isfinite(w).all():
            raise InvariantError(f"{label} weight {t} has non-finite entries")
        w.flags.writeable = False
    return tuple(ws)


class PolicyParams:
    """Weights of the two policy halves.

    Each half is a chain W_0 (features x hidden) followed by square
    hidden-to-hidden matrices, one per message-passing round.
    """

    __slots__ = ("pivot_net", "companion_net")

    def __init__(self, pivot_net, companion_net):
        pivot = _freeze_net(pivot_net, "pivot")
        companion = _freeze_net(companion_net, "companion")
        if len(pivot) != len(companion):
            raise DimensionError(
                f"pivot half has {len(pivot)} matrices, companion {len(companion)}"
            )
        for wp, wc in zip(pivot, companion):
            if wp.shape != wc.shape:
                raise DimensionError("the two halves must share weight shapes")
        self.pivot_net = pivot
        self.companion_net = companion

    @property
    def depth(self):
        return len(self.pivot_net)

    @property
    def hidden(self):
        return self.pivot_net[0].shape[1]

    @property
    def features(self):
        return self.pivot_net[0].shape[0]

    def __repr__(self):
        return f"PolicyParams(depth={self.depth}, hidden={self.hidden})"


def init_policy(rng, depth=4, hidden=10, features=1):
    """Fresh weights, uniform in +-sqrt(6 / (fan_in + fan_out))."""
    if depth < 1 or hidden < 1 or features < 1:
        raise ValueError("depth, hidden and features must all be >= 1")

    def draw(fan_in, fan_out):
        s = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-s, s, size=(fan_in, fan_out))

    halves = []
    for _ in range(2):
        ws = [draw(features, hidden)]
        for _ in range(depth - 1):
            ws.append(draw(hidden, hidden))
        halves.append(ws)
    return PolicyParams(halves[0], halves[1])


class MdpState:
    """One step of the elimination process: level, active rows, base matrix."""

    __slots__ = ("level", "active", "matrix", "drop_size")

    def __init__(self, level, active, matrix, drop_size=1):
        level = int(level)
        drop_size = int(drop_size)
        if level < 0:
            raise InvariantError(f"level must be >= 0, got {level}")
        if drop_size < 1:
            raise InvariantError(f"drop size must be >= 1, got {drop_size}")
        if active.universe != matrix.n:
            raise DimensionError("active set universe does not match the matrix")
        if len(active) != matrix.n - level * drop_size:
            raise InvariantError(
                f"level {level} should leave {matrix.n - level * drop_size} active "
                f"indices, found {len(active)}"
            )
        self.level = level
        self.active = active
        self.matrix = matrix
        self.drop_size = drop_size

    def __repr__(self):
        return f"MdpState(level={self.level}, active={len(self.active)})"


class MdpAction:
    """Rotation support plus the wavelet rows it retires.

    draw_order remembers the sampling sequence (pivot first); it is
    needed to recompute sequential companion probabilities and must
    enumerate the support with the wavelet indices up front.
    """

    __slots__ = ("rotation_support", "wavelet", "draw_order")

    def __init__(self, rotation_support, wavelet, draw_order=None):
        if wavelet.universe != rotation_support.universe:
            raise DimensionError("wavelet and support live in different universes")
        if not wavelet.issubset(rotation_support):
            raise InvariantError("wavelet indices must lie inside the support")
        if len(rotation_support) < 2:
            raise InvariantError("rotation support needs at least two indices")
        if len(wavelet) < 1:
            raise InvariantError("at least one wavelet index per level")
        if draw_order is not None:
            order = tuple(int(i) for i in draw_order)
            if tuple(sorted(order)) != rotation_support.indices:
                raise InvariantError("draw order must enumerate the support exactly")
            c = len(wavelet)
            if tuple(sorted(order[:c])) != wavelet.indices:
                raise InvariantError("draw order must lead with the wavelet indices")
            draw_order = order
        self.rotation_support = rotation_support
        self.wavelet = wavelet
        self.draw_order = draw_order

    def __repr__(self):
        return (
            f"MdpAction(support={self.rotation_support.indices}, "
            f"wavelet={self.wavelet.indices})"
        )


class Trajectory:
    """A full episode: the states visited, actions, scores and rewards."""

    __slots__ = ("states", "actions", "log_probs", "rewards", "returns", "gamma")

    def __init__(self, states, actions, log_probs, rewards, returns_, gamma):
        states = tuple(states)
        actions = tuple(actions)
        log_probs = tuple(float(x) for x in log_probs)
        rewards = tuple(float(x) for x in rewards)
        rets = tuple(float(x) for x in returns_)
        length = len(states)
        if length == 0:
            raise InvariantError("trajectory must hold at least one step")
        if not (len(actions) == len(log_probs) == len(rewards) == len(rets) == length):
            raise InvariantError("trajectory fields disagree on the episode length")
        gamma = float(gamma)
        want = returns(rewards, gamma)
        for got, expect in zip(rets, want):
            if not abs(got - expect) <= 1e-9 * max(1.0, abs(expect)):
                raise InvariantError("stored returns do not match the rewards")
        for i in range(length):
            if not actions[i].rotation_support.issubset(states[i].active):
                raise InvariantError(f"step {i} rotates outside the active set")
            if i + 1 < length:
                if states[i + 1].active != states[i].active.minus(actions[i].wavelet):
                    raise InvariantError(f"state {i + 1} does not follow from step {i}")
                if states[i + 1].level != states[i].level + 1:
                    raise InvariantError("levels must increase by one per step")
        self.states = states
        self.actions = actions
        self.log_probs = log_probs
        self.rewards = rewards
        self.returns = rets
        self.gamma = gamma

    def __len__(self):
        return len(self.states)


# --------------------------------------------------------------- policy net


def _check_chain(weights):
    if not weights:
        raise DimensionError("empty weight list")
    for w in weights:
        if w.ndim != 2:
            raise DimensionError("weights must be matrices")
    for t in range(1, len(weights)):
        if weights[t].shape[0] != weights[t - 1].shape[1]:
            raise DimensionError(
                f"weight {t} expects {weights[t].shape[0]} inputs, "
                f"gets {weights[t - 1].shape[1]}"
            )


def _forward(block, weights):
    """Message-passing stack on one active block.

    Messages start as all-ones features (every row in the block is
    active by construction), each round aggregates over the block and
    applies a rectified linear map.  Returns the concatenated
    per-round messages plus the aggregates and pre-activations the
    backward pass needs.
    """
    m = block.shape[0]
    x = np.ones((m, weights[0].shape[0]))
    aggs, pres, outs = [], [], []
    with np.errstate(over="ignore", invalid="ignore"):
        for w in weights:
            h = block @ x
            z = h @ w
            x = np.maximum(z, 0.0)
            aggs.append(h)
            pres.append(z)
            outs.append(x)
    return np.concatenate(outs, axis=1), aggs, pres


def _backward(block, weights, aggs, pres, d_embed):
    """Pull a gradient on the concatenated messages back onto the weights."""
    widths = [w.shape[1] for w in weights]
    offsets = np.concatenate(([0], np.cumsum(widths)))
    d_ws = [None] * len(weights)
    carry = None
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(len(weights) - 1, -1, -1):
            g = d_embed[:, offsets[t] : offsets[t + 1]]
            if carry is not None:
                g = g + carry
            dz = np.where(pres[t] > 0.0, g, 0.0)
            d_ws[t] = aggs[t].T @ dz
            if t > 0:
                carry = block @ (dz @ weights[t].T)
    return d_ws


def mpnn_embed(a, active, weights):
    """Per-row embeddings of the active block, rounds concatenated."""
    weights = tuple(np.asarray(w, dtype=np.float64) for w in weights)
    _check_chain(weights)
    if active.universe != a.n:
        raise DimensionError("active set universe does not match the matrix")
    idx = active.as_array()
    block = a.a[np.ix_(idx, idx)]
    emb, _, _ = _forward(block, weights)
    return emb


def _log_softmax(v):
    with np.errstate(invalid="ignore"):
        shifted = v - np.max(v)
        logp = shifted - math.log(np.sum(np.exp(shifted)))
        return logp, np.exp(logp)


def pivot_distribution(m, active=None):
    """Softmax over per-row logit sums, computed shift-stable."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"embedding must be a matrix, got shape {m.shape}")
    if active is not None and len(active) != m.shape[0]:
        raise DimensionError(
            f"embedding has {m.shape[0]} rows for {len(active)} active indices"
        )
    _, p = _log_softmax(m.sum(axis=1))
    return p


def gumbel_argmax_sample(p, rng):
    """Perturbed-argmax draw from a categorical distribution.

    Adds standard Gumbel noise to the log probabilities and takes the
    argmax.  Entries with probability zero carry a log of minus
    infinity and are redrawn in the (measure-zero) event they surface
    through the noise.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DimensionError("need a non-empty probability vector")
    if not np.isfinite(p).all() or np.any(p < 0.0) or abs(p.sum() - 1.0) > 1e-9:
        raise InvariantError("not a probability distribution")
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    for _ in range(100):
        with np.errstate(divide="ignore"):
            noise = -np.log(-np.log(rng.random(p.size)))
        choice = int(np.argmax(noise + logp))
        if p[choice] > 0.0:
            return choice
    raise NumericalError("draws kept landing on zero-probability entries")


def sample_action(a, state, params, rng, k, c=1):
    """Draw one action: Gumbel pivot, then companions without replacement.

    The pivot comes from the pivot half's softmax; the remaining k-1
    support indices are drawn one by one from a softmax over companion
    embedding similarities to the pivot, renormalized as candidates
    leave the pool.  Returns the action and its total log probability.
    """
    k = int(k)
    c = int(c)
    if k < 2:
        raise DimensionError(f"rotation order must be >= 2, got {k}")
    if not 1 <= c <= k:
        raise DimensionError(f"drop count {c} must be in 1..k={k}")
    if a.n != state.matrix.n or a.n != state.active.universe:
        raise DimensionError("matrix does not match the state")
    m = len(state.active)
    if m < k:
        raise InfeasibleStateError(f"{m} active indices cannot support order {k}")
    idx = state.active.as_array()
    block = a.a[np.ix_(idx, idx)]

    emb_p, _, _ = _forward(block, params.pivot_net)
    logp_vec, p = _log_softmax(emb_p.sum(axis=1))
    pivot_pos = gumbel_argmax_sample(p, rng)
    logp = logp_vec[pivot_pos]

    emb_c, _, _ = _forward(block, params.companion_net)
    with np.errstate(over="ignore"):
        sims = emb_c @ emb_c[pivot_pos]
    pool = [i for i in range(m) if i != pivot_pos]
    order_pos = [pivot_pos]
    for _ in range(k - 1):
        sub_logp, q = _log_softmax(sims[pool])
        j = gumbel_argmax_sample(q, rng)
        logp += sub_logp[j]
        order_pos.append(pool.pop(j))

    order = tuple(int(idx[i]) for i in order_pos)
    action = MdpAction(
        IndexSet(order, a.n), IndexSet(order[:c], a.n), draw_order=order
    )
    return action, float(logp)


def action_log_prob(state, action, params):
    """Log probability of an action plus its weight gradients.

    The score is rebuilt from the stored draw order (pivot first, then
    companions in sampling sequence); pair rotations can do without the
    order since the lone companion is determined.  Gradients for both
    halves come from manual backpropagation through the softmaxes and
    the message-passing stacks.
    """
    active = state.active
    if not action.rotation_support.issubset(active):
        raise InvariantError("action rotates outside the state's active set")
    order = action.draw_order
    if order is None:
        if len(action.rotation_support) != 2:
            raise InvariantError(
                "draw order is required to score rotations wider than a pair"
            )
        pivot = action.wavelet.indices[0]
        order = (pivot,) + tuple(
            i for i in action.rotation_support.indices if i != pivot
        )
    idx = active.as_array()
    block = state.matrix.a[np.ix_(idx, idx)]
    position = {g: i for i, g in enumerate(active.indices)}
    pivot_pos = position[order[0]]

    emb_p, aggs_p, pres_p = _forward(block, params.pivot_net)
    logp_vec, p = _log_softmax(emb_p.sum(axis=1))
    logp = logp_vec[pivot_pos]
    d_logits = -p
    d_logits[pivot_pos] += 1.0
    d_emb_p = np.repeat(d_logits[:, None], emb_p.shape[1], axis=1)
    grads_p = _backward(block, params.pivot_net, aggs_p, pres_p, d_emb_p)

    emb_c, aggs_c, pres_c = _forward(block, params.companion_net)
    with np.errstate(over="ignore"):
        sims = emb_c @ emb_c[pivot_pos]
    d_sims = np.zeros(len(idx))
    pool = [i for i in range(len(idx)) if i != pivot_pos]
    for companion in order[1:]:
        cp = position[companion]
        sub_logp, q = _log_softmax(sims[pool])
        logp += sub_logp[pool.index(cp)]
        for t, i in enumerate(pool):
            d_sims[i] -= q[t]
        d_sims[cp] += 1.0
        pool.remove(cp)
    d_emb_c = d_sims[:, None] * emb_c[pivot_pos][None, :]
    d_emb_c[pivot_pos] += d_sims @ emb_c
    grads_c = _backward(block, params.companion_net, aggs_c, pres_c, d_emb_c)
    return float(logp), grads_p, grads_c


# ------------------------------------------------------- rewards and returns


def returns(rewards, gamma):
    """Discounted suffix sums g_l = sum_j gamma^j r_{l+j+1}."""
    gamma = float(gamma)
    if not 0.0 < gamma <= 1.0:
        raise InvariantError(f"discount must satisfy 0 < gamma <= 1, got {gamma}")
    out = []
    acc = 0.0
    for r in reversed([float(x) for x in rewards]):
        acc = r + gamma * acc
        out.append(acc)
    return tuple(reversed(out))


def closed_form_rotations(a, actions):
    """Spectral cores for a fixed index sequence, no manifold search.

    At each level the core is the eigenvector matrix of the support
    rows' Gram against the current active set, rows permuted so the
    small-eigenvalue directions land on the coordinates being dropped.
    """
    cur = a.copy_array()
    active = IndexSet.full(a.n)
    rotations = []
    for ac in actions:
        support = ac.rotation_support
        if not support.issubset(active):
            raise InvariantError("action sequence leaves the active set")
        v = closed_form_core(SymMatrix(cur), support, active)
        supp = support.as_array()
        drop_pos = [int(np.where(supp == w)[0][0]) for w in ac.wavelet.as_array()]
        keep_pos = [q for q in range(len(supp)) if q not in drop_pos]
        core = np.empty_like(v)
        for eig_idx, row in enumerate(drop_pos + keep_pos):
            core[row, :] = v[:, eig_idx]
        rot = Rotation(support, core)
        _kern.conjugate_inplace(cur, supp, np.ascontiguousarray(rot.core))
        active = active.minus(ac.wavelet)
        rotations.append(rot)
    return rotations


def _assemble(a, actions, rotations):
    """Factorization for an episode: chain, wavelets, projected tail."""
    transformed = apply_chain(a, rotations, len(rotations))
    active = IndexSet.full(a.n)
    for ac in actions:
        active = active.minus(ac.wavelet)
    return Factorization(
        n=a.n,
        k=len(actions[0].rotation_support),
        c=len(actions[0].wavelet),
        rotations=list(rotations),
        wavelet_sets=[ac.wavelet for ac in actions],
        core=core_diagonal_projection(transformed, active),
    )


def rewards_for_trajectory(a, states, actions, rotations):
    """Per-level rewards: residual mass along the way, final fit at the end.

    Intermediate rewards score the conjugated matrix against the
    post-action active set; the last reward is the negative Frobenius
    distance between the input and the chain's reconstruction.
    """
    length = len(actions)
    if length == 0 or not (len(states) == len(rotations) == length):
        raise InvariantError("states, actions and rotations must align")
    for i, (ac, rot) in enumerate(zip(actions, rotations)):
        if rot.support != ac.rotation_support:
            raise InvariantError(f"rotation {i} does not match its action's support")
        if not ac.rotation_support.issubset(states[i].active):
            raise InvariantError(f"step {i} rotates outside its state's active set")
    cur = a.copy_array()
    active = IndexSet.full(a.n)
    rewards = []
    for i, (ac, rot) in enumerate(zip(actions, rotations)):
        _kern.conjugate_inplace(
            cur, rot.support.as_array(), np.ascontiguousarray(rot.core)
        )
        active = active.minus(ac.wavelet)
        if i < length - 1:
            rewards.append(-residual_norm_sq(SymMatrix(cur), active))
    f = Factorization(
        n=a.n,
        k=len(actions[0].rotation_support),
        c=len(actions[0].wavelet),
        rotations=list(rotations),
        wavelet_sets=[ac.wavelet for ac in actions],
        core=core_diagonal_projection(SymMatrix(cur), active),
    )
    rewards.append(-float(np.linalg.norm(a.a - reconstruct(f).a)))
    return tuple(rewards)


def reinforce_update(params, trajectory, eta, gamma):
    """Score-function ascent, one step per level in episode order.

    Each step's gradient is evaluated at the parameters produced by the
    previous step, exactly as the update rule iterates.  Steps whose
    stored log probability is not finite were substituted by the
    uniform fallback and carry no score term, so they are skipped.
    """
    eta = float(eta)
    gamma = float(gamma)
    if eta <= 0.0:
        raise ValueError(f"step size must be positive, got {eta}")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"discount must satisfy 0 < gamma <= 1, got {gamma}")
    current = params
    for ell in range(len(trajectory)):
        if not math.isfinite(trajectory.log_probs[ell]):
            continue
        _, grads_p, grads_c = action_log_prob(
            trajectory.states[ell], trajectory.actions[ell], current
        )
        for g in grads_p + grads_c:
            if not np.isfinite(g).all():
                raise TrainingDivergenceError(f"non-finite score gradient at step {ell}")
        scale = eta * gamma**ell * trajectory.returns[ell]
        with np.errstate(over="ignore"):
            new_p = [w + scale * g for w, g in zip(current.pivot_net, grads_p)]
            new_c = [w + scale * g for w, g in zip(current.companion_net, grads_c)]
        for w in new_p + new_c:
            if not np.isfinite(w).all():
                raise TrainingDivergenceError(f"parameters diverged at step {ell}")
        current = PolicyParams(new_p, new_c)
    return current


def uniform_valid_action(state, k, c, rng):
    """Uniformly random valid action, the last-resort fallback."""
    m = len(state.active)
    if m < k:
        raise InfeasibleStateError(f"{m} active indices cannot support order {k}")
    picks = rng.choice(m, size=k, replace=False)
    order = tuple(int(state.active.indices[i]) for i in picks)
    n = state.active.universe
    return MdpAction(IndexSet(order, n), IndexSet(order[:c], n), draw_order=order)


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainConfig:
    mmf: MmfConfig
    episodes: int = 300
    gamma: float = 1.0
    eta: float = 1e-3
    omega: int = 50
    depth: int = 4
    hidden: int = 10
    resample_limit: int = 10
    polish_every: int = 0
    polish_final: bool = True

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError(f"episodes must be >= 1, got {self.episodes}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"discount must satisfy 0 < gamma <= 1, got {self.gamma}")
        if self.eta <= 0.0:
            raise ValueError(f"learning rate must be positive, got {self.eta}")
        if self.omega < 1:
            raise ValueError(f"window must be >= 1, got {self.omega}")
        if self.resample_limit < 0 or self.polish_every < 0:
            raise ValueError("resample_limit and polish_every must be >= 0")


@dataclass
class TrainResult:
    factorization: Factorization
    final_error: float
    params: PolicyParams
    trace: tuple
    episodes_run: int
    stopped_early: bool
    invalid_actions: int


def train(a, cfg):
    """Two-phase episodic search for a good index sequence.

    Every episode samples a trajectory, scores it with closed-form
    rotations, and nudges the policy by the score-function rule.  The
    best sequence seen (by reconstruction error) is kept; once the
    omega-window mean of the per-episode error rises, or the episode
    budget runs out, that sequence gets the full manifold polish.

    The trace records (episode, final_error, best_error,
    mean_window_error) per episode and is bitwise reproducible for a
    fixed seed.
    """
    n = a.n
    levels, k, c = cfg.mmf.levels, cfg.mmf.k, cfg.mmf.c
    if levels * c >= n:
        raise DimensionError(f"L*c = {levels * c} must stay below n = {n}")
    streams = np.random.SeedSequence(cfg.mmf.seed).spawn(cfg.episodes + 1)
    params = init_policy(np.random.default_rng(streams[0]), cfg.depth, cfg.hidden)

    best_error = math.inf
    best_actions = None
    finals = []
    trace = []
    invalid = 0
    stopped = False
    for episode in range(1, cfg.episodes + 1):
        rng = np.random.default_rng(streams[episode])
        states, actions, log_probs = [], [], []
        active = IndexSet.full(n)
        for level in range(levels):
            state = MdpState(level, active, a, c)
            # deep sweeps leave fewer than k active indices on the last
            # levels; the rotation order shrinks with the pool (it can
            # never go below c + 1 because L*c < n)
            k_level = min(k, len(active))
            action = None
            logp = float("nan")
            for _ in range(cfg.resample_limit + 1):
                try:
                    candidate, lp = sample_action(a, state, params, rng, k_level, c)
                except (InvariantError, NumericalError):
                    invalid += 1
                    continue
                if math.isfinite(lp):
                    action, logp = candidate, lp
                    break
                invalid += 1
            if action is None:
                action = uniform_valid_action(state, k_level, c, rng)
            states.append(state)
            actions.append(action)
            log_probs.append(logp)
            active = active.minus(action.wavelet)

        rotations = closed_form_rotations(a, actions)
        if cfg.polish_every and episode % cfg.polish_every == 0:
            polished = optimize_rotations(a, _assemble(a, actions, rotations), cfg.mmf)
            rotations = list(polished.rotations)
        rewards = rewards_for_trajectory(a, states, actions, rotations)
        trajectory = Trajectory(
            states, actions, log_probs, rewards, returns(rewards, cfg.gamma), cfg.gamma
        )
        params = reinforce_update(params, trajectory, cfg.eta, cfg.gamma)

        final_error = -rewards[-1]
        if final_error < best_error:
            best_error = final_error
            best_actions = actions
        finals.append(final_error)
        window = finals[-cfg.omega :]
        mean_window = sum(window) / len(window)
        trace.append((episode, final_error, best_error, mean_window))
        if episode > cfg.omega and mean_window > trace[-2][3]:
            stopped = True
            break

    f = _assemble(a, best_actions, closed_form_rotations(a, best_actions))
    if cfg.polish_final:
        f = optimize_rotations(a, f, cfg.mmf)
    return TrainResult(
        factorization=f,
        final_error=math.sqrt(objective(a, f)),
        params=params,
        trace=tuple(trace),
        episodes_run=len(trace),
        stopped_early=stopped,
        invalid_actions=invalid,
    )


# -------------------------------------------------------------- persistence


def write_trace_csv(rows, path):
    """Training trace as CSV, floats at full round-trip precision."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as handle:
            handle.write("episode,final_error,best_error,mean_window_error\n")
            for episode, final_error, best_error, mean_window in rows:
                handle.write(
                    f"{int(episode)},{final_error:.17g},"
                    f"{best_error:.17g},{mean_window:.17g}\n"
                )
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_policy(params, path):
    doc = {
        "format": _POLICY_TAG,
        "version": _POLICY_VERSION,
        "pivot_net": [[[float(x) for x in row] for row in w] for w in params.pivot_net],
        "companion_net": [
            [[float(x) for x in row] for row in w] for w in params.companion_net
        ],
    }
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            json.dump(doc, handle)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_policy(path):
    """Rebuild checkpointed weights, re-running every shape check."""
    try:
        with open(path) as handle:
            doc = json.load(handle)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"not a policy file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != _POLICY_TAG:
        raise SchemaError("missing or wrong format tag")
    if doc.get("version") != _POLICY_VERSION:
        raise SchemaError(f"unsupported version {doc.get('version')!r}")
    try:
        pivot = [np.array(w, dtype=np.float64) for w in doc["pivot_net"]]
        companion = [np.array(w, dtype=np.float64) for w in doc["companion_net"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed policy document: {exc}") from exc
    return PolicyParams(pivot, companion)
