"""Iterative No-U-Turn sampler, vectorized across chains.

The recursive doubling of the textbook algorithm is unrolled into two
loops: an outer loop over tree depth and an inner loop over the ``2**d``
leapfrog steps of the new subtree. Every chain runs the same number of
batched gradient evaluations; chains that have stopped keep their values
through masked selects.

The U-turn checks a recursive builder would perform at the end of each
sub-subtree are replayed from the binary representation of the step index:
after step ``i`` (0-based within the subtree), every ``k >= 1`` with
``2**k`` dividing ``i + 1`` closes a sub-subtree whose first point is step
``i + 1 - 2**k``. Only even steps can open a sub-subtree, and the open ones
at any time have distinct popcounts, so a checkpoint slot indexed by
``popcount(j)`` never evicts a point that is still needed. That bounds the
checkpoint memory at ``max_tree_depth - 1`` state/momentum pairs.

Candidates are drawn by progressive multinomial sampling with weights
``exp(H0 - H)``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from batchmc import numerics
from batchmc.hmc import kinetic_energy, leapfrog, sample_momentum, step_size_parts
from batchmc.kernel import (
    TransitionKernel,
    as_parts,
    chain_keys,
    check_finite_state,
    num_chains,
    restore_structure,
    value_and_gradient,
)

__all__ = [
    "CheckpointBuffer",
    "NoUTurnSampler",
    "NoUTurnSamplerResults",
    "STOP_DIVERGENCE",
    "STOP_MAX_DEPTH",
    "STOP_UTURN",
    "TrajectoryResult",
    "build_trajectory",
    "has_u_turn",
    "hamiltonian",
]

STOP_MAX_DEPTH = 0
STOP_UTURN = 1
STOP_DIVERGENCE = 2
STOP_REASONS = {STOP_MAX_DEPTH: "max_depth", STOP_UTURN: "uturn", STOP_DIVERGENCE: "divergence"}


class NoUTurnSamplerResults(NamedTuple):
    target_log_prob: np.ndarray
    grads_target_log_prob: list
    step_size: list
    log_accept_ratio: np.ndarray
    leapfrogs_taken: np.ndarray
    depth_reached: np.ndarray
    is_divergent: np.ndarray
    energy_change: np.ndarray


class TrajectoryResult(NamedTuple):
    state: list
    target_log_prob: np.ndarray
    grads_target_log_prob: list
    energy_change: np.ndarray
    mean_accept_prob: np.ndarray
    leapfrogs_taken: np.ndarray
    depth_reached: np.ndarray
    stop_reason: np.ndarray
    num_grad_evals: int


def hamiltonian(target_log_prob, momentum) -> np.ndarray:
    """``-tlp + 0.5 |p|^2`` per chain; NaN maps to ``+inf``."""
    with np.errstate(invalid="ignore"):
        h = kinetic_energy(momentum) - target_log_prob
    return np.where(np.isnan(h), np.inf, h)


def has_u_turn(x_plus, p_plus, x_minus, p_minus) -> np.ndarray:
    """True where ``(x+ - x-) . p-  < 0`` or ``(x+ - x-) . p+ < 0``.

    Dot products run over every event element of every part.
    """
    dot_minus = 0.0
    dot_plus = 0.0
    with np.errstate(invalid="ignore", over="ignore"):
        for xp, pp, xm, pm in zip(x_plus, p_plus, x_minus, p_minus):
            diff = xp - xm
            dot_minus = dot_minus + numerics.reduce_sum_event(diff * pm)
            dot_plus = dot_plus + numerics.reduce_sum_event(diff * pp)
    return (dot_minus < 0) | (dot_plus < 0)


class CheckpointBuffer:
    """Fixed-size in-place store of subtree start points.

    ``capacity`` slots per chain, each holding one (state, momentum) pair.
    ``slots_used`` records every slot ever written, for memory assertions.
    """

    def __init__(self, capacity: int, parts):
        self.capacity = int(capacity)
        self.state = [np.zeros((self.capacity,) + p.shape, dtype=p.dtype) for p in parts]
        self.momentum = [np.zeros((self.capacity,) + p.shape, dtype=p.dtype) for p in parts]
        self.slots_used: set[int] = set()

    def write(self, slot: int, mask, state, momentum):
        if not 0 <= slot < self.capacity:
            raise IndexError(f"checkpoint slot {slot} outside capacity {self.capacity}")
        for buf, new in zip(self.state, state):
            buf[slot] = np.where(numerics.left_justified_expand_dims_like(mask, new), new, buf[slot])
        for buf, new in zip(self.momentum, momentum):
            buf[slot] = np.where(numerics.left_justified_expand_dims_like(mask, new), new, buf[slot])
        self.slots_used.add(slot)

    def read(self, slot: int):
        return [b[slot] for b in self.state], [b[slot] for b in self.momentum]


def _uturn_check_slots(i: int, depth: int) -> list[int]:
    """Checkpoint slots to test against after subtree step ``i``."""
    slots = []
    for k in range(1, depth + 1):
        size = 1 << k
        if (i + 1) % size:
            break
        slots.append(bin(i + 1 - size).count("1"))
    return slots


def _sel(mask, a, b):
    if mask.all():
        return list(a)
    if not mask.any():
        return list(b)
    return [np.where(mask.reshape(mask.shape + (1,) * (x.ndim - 1)), x, y) for x, y in zip(a, b)]


class _Point(NamedTuple):
    state: list
    momentum: list
    target_log_prob: np.ndarray
    grads: list


def _select_point(mask, a: _Point, b: _Point) -> _Point:
    if mask.all():
        return a
    if not mask.any():
        return b
    return _Point(
        _sel(mask, a.state, b.state),
        _sel(mask, a.momentum, b.momentum),
        np.where(mask, a.target_log_prob, b.target_log_prob),
        _sel(mask, a.grads, b.grads),
    )


def build_trajectory(
    state,
    momentum,
    target_log_prob,
    grads,
    directions,
    step_uniforms,
    merge_uniforms,
    leapfrog_fn,
    max_tree_depth: int,
    max_energy_diff: float = 1000.0,
    recorder=None,
) -> TrajectoryResult:
    """Runs one NUTS trajectory for every chain.

    Args:
      state, momentum, grads: lists of parts of shape ``[C, ...]``.
      target_log_prob: ``[C]`` target at ``state``.
      directions: ``[C, max_tree_depth]`` bool, True extends forward.
      step_uniforms: callable ``depth -> [C, 2**depth]`` uniforms for the
        within-subtree candidate draws.
      merge_uniforms: ``[C, max_tree_depth]`` uniforms for subtree merges.
      leapfrog_fn: ``(state, momentum, grads, signed_step) ->
        (state, momentum, tlp, grads)`` for one batched step, where
        ``signed_step`` is +1/-1 per chain.
      max_tree_depth: number of doublings allowed.
      max_energy_diff: ``|H - H0|`` above this is a divergence.
      recorder: optional instrumentation with ``on_step`` and
        ``on_subtree`` hooks (used by tests).

    Returns:
      A ``TrajectoryResult``.
    """
    c = target_log_prob.shape[0]
    dtype = target_log_prob.dtype
    directions = np.asarray(directions, dtype=bool)
    merge_uniforms = np.asarray(merge_uniforms)
    h0 = hamiltonian(target_log_prob, momentum)

    left = right = _Point(list(state), list(momentum), target_log_prob, list(grads))
    cand_state, cand_tlp, cand_grads = list(state), target_log_prob, list(grads)
    cand_weight = np.zeros(c, dtype=dtype)
    log_weight_total = np.zeros(c, dtype=dtype)

    active = np.ones(c, dtype=bool)
    depth_reached = np.zeros(c, dtype=np.int64)
    stop_reason = np.full(c, STOP_MAX_DEPTH, dtype=np.int64)
    leapfrogs = np.zeros(c, dtype=np.int64)
    accept_sum = np.zeros(c, dtype=dtype)
    num_grad_evals = 0
    position_left = np.zeros(c, dtype=np.int64)
    position_right = np.zeros(c, dtype=np.int64)
    buffer = CheckpointBuffer(max(1, max_tree_depth - 1), state)
    if recorder is not None:
        recorder.buffer = buffer

    with np.errstate(all="ignore"):
        for d in range(max_tree_depth):
            if not active.any():
                break
            forward = directions[:, d]
            sign = np.where(forward, 1.0, -1.0).astype(dtype)
            cur = _select_point(forward, right, left)
            position = np.where(forward, position_right, position_left)
            step_u = np.asarray(step_uniforms(d))

            sub_active = active.copy()
            sub_failed = np.zeros(c, dtype=bool)
            sub_reason = np.full(c, STOP_MAX_DEPTH, dtype=np.int64)
            sub_log_weight = np.full(c, -np.inf, dtype=dtype)
            sub_state, sub_tlp, sub_grads = cur.state, cur.target_log_prob, cur.grads
            sub_weight = np.full(c, -np.inf, dtype=dtype)

            for i in range(1 << d):
                if not sub_active.any():
                    break
                x, p, tlp, g = leapfrog_fn(cur.state, cur.momentum, cur.grads, sign)
                num_grad_evals += 1
                nxt = _Point(list(x), list(p), np.asarray(tlp), list(g))
                cur = _select_point(sub_active, nxt, cur)
                position = np.where(sub_active, position + np.where(forward, 1, -1), position)

                h = hamiltonian(nxt.target_log_prob, nxt.momentum)
                weight = (h0 - h).astype(dtype)
                divergent = ~(np.abs(h - h0) <= max_energy_diff)
                accept_sum = accept_sum + np.where(sub_active, np.exp(np.minimum(weight, 0.0)), 0.0)
                leapfrogs = leapfrogs + sub_active

                usable = sub_active & ~divergent
                new_log_weight = np.logaddexp(sub_log_weight, weight)
                take = usable & (np.log(step_u[:, i]) < weight - new_log_weight)
                if take.any():
                    sub_state = _sel(take, nxt.state, sub_state)
                    sub_tlp = np.where(take, nxt.target_log_prob, sub_tlp)
                    sub_grads = _sel(take, nxt.grads, sub_grads)
                    sub_weight = np.where(take, weight, sub_weight)
                sub_log_weight = np.where(usable, new_log_weight, sub_log_weight)

                uturn = np.zeros(c, dtype=bool)
                for slot in _uturn_check_slots(i, d):
                    x_old, p_old = buffer.read(slot)
                    x_plus = _sel(forward, nxt.state, x_old)
                    p_plus = _sel(forward, nxt.momentum, p_old)
                    x_minus = _sel(forward, x_old, nxt.state)
                    p_minus = _sel(forward, p_old, nxt.momentum)
                    uturn |= has_u_turn(x_plus, p_plus, x_minus, p_minus)
                if d >= 1 and i % 2 == 0:
                    buffer.write(bin(i).count("1"), sub_active, nxt.state, nxt.momentum)

                fail = sub_active & (divergent | uturn)
                if recorder is not None:
                    recorder.on_step(d, i, sub_active.copy(), position.copy(), weight.copy(),
                                     divergent & sub_active, uturn & sub_active & ~divergent)
                sub_reason = np.where(fail, np.where(divergent, STOP_DIVERGENCE, STOP_UTURN), sub_reason)
                sub_failed |= fail
                sub_active &= ~fail

            merge = active & ~sub_failed
            new_total = np.logaddexp(log_weight_total, sub_log_weight)
            take = merge & (np.log(merge_uniforms[:, d]) < sub_log_weight - new_total)
            cand_state = _sel(take, sub_state, cand_state)
            cand_tlp = np.where(take, sub_tlp, cand_tlp)
            cand_grads = _sel(take, sub_grads, cand_grads)
            cand_weight = np.where(take, sub_weight, cand_weight)
            log_weight_total = np.where(merge, new_total, log_weight_total)

            right = _select_point(merge & forward, cur, right)
            left = _select_point(merge & ~forward, cur, left)
            position_right = np.where(merge & forward, position, position_right)
            position_left = np.where(merge & ~forward, position, position_left)
            full_uturn = merge & has_u_turn(right.state, right.momentum, left.state, left.momentum)

            if recorder is not None:
                recorder.on_subtree(d, active.copy(), merge.copy(), full_uturn.copy())
            depth_reached = depth_reached + active
            stop_reason = np.where(active & sub_failed, sub_reason, stop_reason)
            stop_reason = np.where(full_uturn, STOP_UTURN, stop_reason)
            active = active & ~sub_failed & ~full_uturn


    mean_accept = accept_sum / np.maximum(leapfrogs, 1)
    return TrajectoryResult(
        state=cand_state,
        target_log_prob=cand_tlp,
        grads_target_log_prob=cand_grads,
        energy_change=-cand_weight,
        mean_accept_prob=mean_accept,
        leapfrogs_taken=leapfrogs,
        depth_reached=depth_reached,
        stop_reason=stop_reason,
        num_grad_evals=num_grad_evals,
    )


class NoUTurnSampler(TransitionKernel):
    """Multinomial NUTS with bounded depth; calibrated.

    Per chain, the key schedule is: ``fold_in(k, 0)`` momentum, ``fold_in(k,
    1)`` direction bits (bit ``d`` of one 32-bit word), ``fold_in(fold_in(k,
    2), d)`` the ``2**d`` within-subtree uniforms at depth ``d``, and
    ``fold_in(k, 3)`` the merge uniforms.
    """

    def __init__(self, target_log_prob_fn, step_size, max_tree_depth: int = 10,
                 max_energy_diff: float = 1000.0, value_and_grad_fn=None):
        if not 1 <= int(max_tree_depth) <= 30:
            raise ValueError(f"max_tree_depth must be in [1, 30], got {max_tree_depth}")
        if not max_energy_diff > 0:
            raise ValueError(f"max_energy_diff must be positive, got {max_energy_diff}")
        self._target_log_prob_fn = target_log_prob_fn
        self._step_size = step_size
        self._max_tree_depth = int(max_tree_depth)
        self._max_energy_diff = float(max_energy_diff)
        self._value_and_grad_fn = value_and_grad_fn

    @property
    def target_log_prob_fn(self):
        return self._target_log_prob_fn

    @property
    def max_tree_depth(self) -> int:
        return self._max_tree_depth

    def _value_and_grad(self, parts):
        return value_and_gradient(self._target_log_prob_fn, parts, self._value_and_grad_fn)

    def bootstrap_results(self, init_state):
        parts, _ = as_parts(init_state)
        check_finite_state(parts)
        tlp, grads = self._value_and_grad(parts)
        c = tlp.shape[0]
        return NoUTurnSamplerResults(
            target_log_prob=tlp,
            grads_target_log_prob=grads,
            step_size=step_size_parts(self._step_size, parts),
            log_accept_ratio=np.zeros(c, dtype=tlp.dtype),
            leapfrogs_taken=np.zeros(c, dtype=np.int64),
            depth_reached=np.zeros(c, dtype=np.int64),
            is_divergent=np.zeros(c, dtype=bool),
            energy_change=np.zeros(c, dtype=tlp.dtype),
        )

    def one_step(self, current_state, previous_kernel_results, key, recorder=None):
        parts, was_list = as_parts(current_state)
        c = num_chains(parts)
        keys = chain_keys(key, c)
        tlp = np.asarray(previous_kernel_results.target_log_prob)
        step_size = [np.asarray(s) for s in previous_kernel_results.step_size]
        momentum = sample_momentum(parts, numerics.fold_in(keys, 0))
        words = numerics.random_bits(numerics.fold_in(keys, 1), 1)[:, 0]
        directions = ((words[:, None] >> np.arange(self._max_tree_depth, dtype=np.uint32)) & 1) == 1
        step_key = numerics.fold_in(keys, 2)
        merge_u = numerics.sample_uniform(numerics.fold_in(keys, 3), (c, self._max_tree_depth), tlp.dtype)

        def step_uniforms(d):
            return numerics.sample_uniform(numerics.fold_in(step_key, d), (c, 1 << d), tlp.dtype)

        def leapfrog_fn(x, p, g, sign):
            signed = [numerics.left_justified_expand_dims_like(sign, part) * s
                      for s, part in zip(step_size, x)]
            r = leapfrog(x, p, signed, 1, self._value_and_grad, grads=g)
            return r.state, r.momentum, r.target_log_prob, r.grads_target_log_prob

        traj = build_trajectory(
            parts, momentum, tlp, previous_kernel_results.grads_target_log_prob,
            directions, step_uniforms, merge_u, leapfrog_fn,
            self._max_tree_depth, self._max_energy_diff, recorder)
        with np.errstate(divide="ignore"):
            log_accept = np.log(traj.mean_accept_prob).astype(tlp.dtype)
        results = NoUTurnSamplerResults(
            target_log_prob=traj.target_log_prob,
            grads_target_log_prob=traj.grads_target_log_prob,
            step_size=step_size,
            log_accept_ratio=log_accept,
            leapfrogs_taken=traj.leapfrogs_taken,
            depth_reached=traj.depth_reached,
            is_divergent=traj.stop_reason == STOP_DIVERGENCE,
            energy_change=traj.energy_change.astype(tlp.dtype),
        )
        return restore_structure(traj.state, was_list), results
