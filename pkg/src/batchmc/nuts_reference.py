"""Recursive NUTS tree builder, kept as a test oracle for the unrolled one.

This is the textbook pre-order doubling recursion for a single chain. It
returns every trajectory point that remains a candidate together with its
log weight, plus the depth and reason at which building stopped. The
direction sequence and leapfrog map are supplied by the caller so the
iterative builder can be fed exactly the same inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from batchmc.nuts import has_u_turn, hamiltonian

__all__ = ["ReferenceTree", "recursive_nuts_reference"]


@dataclass
class _Subtree:
    minus: tuple
    plus: tuple
    points: list = field(default_factory=list)
    stop: bool = False
    reason: str = ""


@dataclass
class ReferenceTree:
    candidates: list  # (signed position, log weight) pairs
    stop_depth: int
    stop_reason: str  # "uturn", "divergence" or "max_depth"


def recursive_nuts_reference(state, momentum, target_log_prob, grads, directions, leapfrog_fn,
                             max_energy_diff: float = 1000.0) -> ReferenceTree:
    """Builds the NUTS trajectory by explicit recursion.

    Args:
      state, momentum, grads: lists of parts with a chain axis of extent 1.
      target_log_prob: ``[1]`` target value at ``state``.
      directions: sequence of bools (True = forward); its length is the
        maximum tree depth.
      leapfrog_fn: same contract as for ``build_trajectory``.
      max_energy_diff: divergence threshold on ``|H - H0|``.
    """
    h0 = hamiltonian(target_log_prob, momentum)

    def step(point, forward):
        x, p, g, pos = point
        sign = np.array([1.0 if forward else -1.0], dtype=target_log_prob.dtype)
        x, p, tlp, g = leapfrog_fn(x, p, g, sign)
        return (list(x), list(p), list(g), pos + (1 if forward else -1)), np.asarray(tlp)

    def build(point, forward, depth) -> _Subtree:
        if depth == 0:
            new, tlp = step(point, forward)
            h = hamiltonian(tlp, new[1])
            with np.errstate(invalid="ignore", over="ignore"):
                weight = float((h0 - h)[0])
                divergent = not bool(np.abs(h - h0)[0] <= max_energy_diff)
            return _Subtree(new, new, [(new[3], weight)], divergent, "divergence" if divergent else "")
        first = build(point, forward, depth - 1)
        if first.stop:
            return first
        second = build(first.plus if forward else first.minus, forward, depth - 1)
        if second.stop:
            return second
        if forward:
            minus, plus = first.minus, second.plus
        else:
            minus, plus = second.minus, first.plus
        turned = bool(has_u_turn(plus[0], plus[1], minus[0], minus[1])[0])
        return _Subtree(minus, plus, first.points + second.points, turned, "uturn" if turned else "")

    origin = (list(state), list(momentum), list(grads), 0)
    minus = plus = origin
    candidates = [(0, 0.0)]
    for d, forward in enumerate(directions):
        sub = build(plus if forward else minus, bool(forward), d)
        if sub.stop:
            return ReferenceTree(candidates, d + 1, sub.reason)
        candidates = candidates + sub.points
        if forward:
            plus = sub.plus
        else:
            minus = sub.minus
        if bool(has_u_turn(plus[0], plus[1], minus[0], minus[1])[0]):
            return ReferenceTree(candidates, d + 1, "uturn")
    return ReferenceTree(candidates, len(directions), "max_depth")
