"""Metropolis-Hastings correction and the uncalibrated random-walk proposal."""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from batchmc import numerics
from batchmc.errors import ContractError
from batchmc.kernel import (
    TransitionKernel,
    as_parts,
    call_target,
    chain_keys,
    check_finite_state,
    num_chains,
    restore_structure,
    select_per_chain,
)

__all__ = [
    "MetropolisHastings",
    "MetropolisHastingsResults",
    "RandomWalkMetropolis",
    "UncalibratedRandomWalk",
    "UncalibratedRandomWalkResults",
    "mh_accept",
    "random_walk_normal_fn",
]


class MetropolisHastingsResults(NamedTuple):
    accepted_results: object
    is_accepted: np.ndarray
    log_accept_ratio: np.ndarray
    proposed_state: object
    proposed_results: object
    is_nan_proposal: np.ndarray


class UncalibratedRandomWalkResults(NamedTuple):
    log_acceptance_correction: np.ndarray
    target_log_prob: np.ndarray


def mh_accept(log_accept_ratio, log_uniform) -> np.ndarray:
    """Accept iff ``log u < min(0, log r)``; ties reject."""
    return np.asarray(log_uniform) < np.minimum(0.0, log_accept_ratio)


def _required_leaf(results, name):
    try:
        return np.asarray(getattr(results, name))
    except AttributeError:
        raise ContractError(
            f"inner kernel results {type(results).__name__} lack required leaf {name!r}") from None


class MetropolisHastings(TransitionKernel):
    """Wraps an uncalibrated kernel with a vectorized accept/reject step.

    The inner kernel's results must carry ``target_log_prob`` and
    ``log_acceptance_correction`` leaves of shape ``[C]``. The current
    target value is taken from the cached accepted results, so the target is
    evaluated only once per step (by the inner proposal).
    """

    def __init__(self, inner_kernel: TransitionKernel):
        self._inner_kernel = inner_kernel

    @property
    def inner_kernel(self) -> TransitionKernel:
        return self._inner_kernel

    @property
    def is_calibrated(self) -> bool:
        return True

    def bootstrap_results(self, init_state):
        parts, _ = as_parts(init_state)
        check_finite_state(parts)
        inner = self._inner_kernel.bootstrap_results(init_state)
        tlp = _required_leaf(inner, "target_log_prob")
        _required_leaf(inner, "log_acceptance_correction")
        c = num_chains(parts)
        return MetropolisHastingsResults(
            accepted_results=inner,
            is_accepted=np.ones(c, dtype=bool),
            log_accept_ratio=np.zeros(c, dtype=tlp.dtype),
            proposed_state=init_state,
            proposed_results=inner,
            is_nan_proposal=np.zeros(c, dtype=bool),
        )

    def one_step(self, current_state, previous_kernel_results, key):
        parts, was_list = as_parts(current_state)
        c = num_chains(parts)
        keys = chain_keys(key, c)
        proposed_state, proposed_results = self._inner_kernel.one_step(
            current_state, previous_kernel_results.accepted_results, numerics.fold_in(keys, 0))

        proposed_tlp = _required_leaf(proposed_results, "target_log_prob")
        correction = _required_leaf(proposed_results, "log_acceptance_correction")
        current_tlp = _required_leaf(previous_kernel_results.accepted_results, "target_log_prob")
        with np.errstate(invalid="ignore"):
            log_ratio = proposed_tlp - current_tlp + correction
        is_nan = np.isnan(log_ratio)
        log_ratio = np.where(is_nan, -np.inf, log_ratio).astype(current_tlp.dtype)

        u = numerics.sample_uniform(numerics.fold_in(keys, 1), (c,), dtype=current_tlp.dtype)
        with np.errstate(divide="ignore"):
            is_accepted = mh_accept(log_ratio, np.log(u))

        proposed_parts, _ = as_parts(proposed_state)
        next_parts = [
            numerics.select(numerics.left_justified_expand_dims_like(is_accepted, p), p, q)
            for p, q in zip(proposed_parts, parts)
        ]
        accepted_results = select_per_chain(
            is_accepted, proposed_results, previous_kernel_results.accepted_results)
        results = MetropolisHastingsResults(
            accepted_results=accepted_results,
            is_accepted=is_accepted,
            log_accept_ratio=log_ratio,
            proposed_state=proposed_state,
            proposed_results=proposed_results,
            is_nan_proposal=is_nan,
        )
        return restore_structure(next_parts, was_list), results


def random_walk_normal_fn(scale=1.0) -> Callable:
    """Gaussian random-walk proposal ``x + scale * eps`` (symmetric).

    ``scale`` is a scalar or a list with one entry per state part, each
    broadcastable to that part.
    """
    scales = scale if isinstance(scale, (list, tuple)) else None
    for s in scales if scales is not None else [scale]:
        if not np.all(np.asarray(s) > 0):
            raise ValueError(f"random-walk scale must be positive, got {s}")

    def _fn(parts, keys):
        out = []
        for j, part in enumerate(parts):
            s = scales[j] if scales is not None else scale
            eps = numerics.sample_standard_normal(numerics.fold_in(keys, j), part.shape, part.dtype)
            out.append(part + np.asarray(s, dtype=part.dtype) * eps)
        tlp_dtype = np.result_type(*[p.dtype for p in parts])
        return out, np.zeros(parts[0].shape[0], dtype=tlp_dtype)

    return _fn


class UncalibratedRandomWalk(TransitionKernel):
    """Proposes ``new_state_fn(parts, keys)``; must be wrapped in MH.

    Args:
      target_log_prob_fn: batched target, ``(*parts) -> [C]``.
      new_state_fn: ``(parts, per_chain_keys) -> (new_parts, log_correction)``.
        Defaults to a unit-scale Gaussian random walk.
    """

    def __init__(self, target_log_prob_fn, new_state_fn=None):
        self._target_log_prob_fn = target_log_prob_fn
        self._new_state_fn = new_state_fn if new_state_fn is not None else random_walk_normal_fn()

    @property
    def target_log_prob_fn(self):
        return self._target_log_prob_fn

    @property
    def is_calibrated(self) -> bool:
        return False

    def bootstrap_results(self, init_state):
        parts, _ = as_parts(init_state)
        tlp = call_target(self._target_log_prob_fn, parts)
        return UncalibratedRandomWalkResults(
            log_acceptance_correction=np.zeros_like(tlp), target_log_prob=tlp)

    def one_step(self, current_state, previous_kernel_results, key):
        parts, was_list = as_parts(current_state)
        keys = chain_keys(key, num_chains(parts))
        new_parts, correction = self._new_state_fn(parts, keys)
        new_parts = [np.asarray(p, dtype=q.dtype) for p, q in zip(new_parts, parts)]
        tlp = call_target(self._target_log_prob_fn, new_parts)
        results = UncalibratedRandomWalkResults(
            log_acceptance_correction=np.asarray(correction, dtype=tlp.dtype),
            target_log_prob=tlp)
        return restore_structure(new_parts, was_list), results


class RandomWalkMetropolis(MetropolisHastings):
    """``MetropolisHastings(UncalibratedRandomWalk(...))`` with a Gaussian step."""

    def __init__(self, target_log_prob_fn, scale=1.0, new_state_fn=None):
        if new_state_fn is None:
            new_state_fn = random_walk_normal_fn(scale)
        super().__init__(UncalibratedRandomWalk(target_log_prob_fn, new_state_fn))
