"""Hamiltonian Monte Carlo with an identity mass matrix, batched over chains."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from batchmc import numerics
from batchmc.kernel import (
    TransitionKernel,
    as_parts,
    chain_keys,
    num_chains,
    restore_structure,
    value_and_gradient,
)
from batchmc.metropolis import MetropolisHastings

__all__ = [
    "HamiltonianMonteCarlo",
    "LeapfrogResult",
    "UncalibratedHamiltonianMonteCarlo",
    "UncalibratedHamiltonianMonteCarloResults",
    "kinetic_energy",
    "leapfrog",
    "sample_momentum",
    "step_size_parts",
]


class UncalibratedHamiltonianMonteCarloResults(NamedTuple):
    log_acceptance_correction: np.ndarray
    target_log_prob: np.ndarray
    grads_target_log_prob: list
    step_size: list
    is_divergent: np.ndarray


class LeapfrogResult(NamedTuple):
    state: list
    momentum: list
    target_log_prob: np.ndarray
    grads_target_log_prob: list
    is_divergent: np.ndarray


def step_size_parts(step_size, parts) -> list[np.ndarray]:
    """Normalizes a scalar or per-part step size to one array per part."""
    if isinstance(step_size, (list, tuple)):
        if len(step_size) != len(parts):
            raise ValueError(f"got {len(step_size)} step sizes for {len(parts)} state parts")
        sizes = list(step_size)
    else:
        sizes = [step_size] * len(parts)
    out = []
    for s, part in zip(sizes, parts):
        s = np.asarray(s, dtype=part.dtype)
        if not np.all(s > 0):
            raise ValueError(f"step size must be positive, got {s}")
        numerics.broadcast_shapes(s.shape, part.shape)
        out.append(s)
    return out


def sample_momentum(parts, key) -> list[np.ndarray]:
    """One independent standard-normal momentum per state element per chain."""
    keys = chain_keys(key, num_chains(parts))
    return [
        numerics.sample_standard_normal(numerics.fold_in(keys, j), part.shape, part.dtype)
        for j, part in enumerate(parts)
    ]


def kinetic_energy(momentum) -> np.ndarray:
    """``0.5 * sum(p**2)`` over event dims of every part, per chain."""
    return sum(0.5 * numerics.reduce_sum_event(np.square(p)) for p in momentum)


def _not_finite(tlp, grads) -> np.ndarray:
    bad = ~np.isfinite(tlp)
    for g in grads:
        bad = bad | ~np.isfinite(numerics.reduce_sum_event(g))
    return bad


def leapfrog(state, momentum, step_size, num_steps, value_and_grad, grads=None) -> LeapfrogResult:
    """Runs ``num_steps`` leapfrog steps for every chain at once.

    Args:
      state: list of position parts.
      momentum: list of momentum parts, same shapes as ``state``.
      step_size: list of per-part step sizes broadcastable to the parts. A
        per-chain sign (``+eps`` / ``-eps``) is how NUTS integrates backwards.
      num_steps: number of full steps, shared by all chains.
      value_and_grad: ``parts -> (tlp, grads)``, batched.
      grads: gradient at ``state`` if already known.

    Returns:
      A ``LeapfrogResult``; chains that met a non-finite value on the way are
      flagged in ``is_divergent`` instead of raising.
    """
    x = [np.asarray(s) for s in state]
    p = [np.asarray(m) for m in momentum]
    eps = [np.asarray(e) for e in step_size]
    divergent = np.zeros(x[0].shape[0], dtype=bool)
    with np.errstate(all="ignore"):
        if grads is None:
            _, grads = value_and_grad(x)
        g = list(grads)
        p = [pi + 0.5 * ei * gi for pi, ei, gi in zip(p, eps, g)]
        tlp = None
        for step in range(num_steps):
            x = [xi + ei * pi for xi, ei, pi in zip(x, eps, p)]
            tlp, g = value_and_grad(x)
            divergent |= _not_finite(tlp, g)
            if step < num_steps - 1:
                p = [pi + ei * gi for pi, ei, gi in zip(p, eps, g)]
        p = [pi + 0.5 * ei * gi for pi, ei, gi in zip(p, eps, g)]
    if tlp is None:
        tlp, _ = value_and_grad(x)
    return LeapfrogResult(x, p, tlp, list(g), divergent)


class UncalibratedHamiltonianMonteCarlo(TransitionKernel):
    """Leapfrog proposal with kinetic-energy Hastings correction.

    The step size lives in the results (``step_size`` leaf) so adaptation
    wrappers can change it without rebuilding the kernel.
    """

    def __init__(self, target_log_prob_fn, step_size, num_leapfrog_steps, value_and_grad_fn=None):
        if int(num_leapfrog_steps) < 1:
            raise ValueError(f"num_leapfrog_steps must be >= 1, got {num_leapfrog_steps}")
        self._target_log_prob_fn = target_log_prob_fn
        self._step_size = step_size
        self._num_leapfrog_steps = int(num_leapfrog_steps)
        self._value_and_grad_fn = value_and_grad_fn

    @property
    def target_log_prob_fn(self):
        return self._target_log_prob_fn

    @property
    def num_leapfrog_steps(self) -> int:
        return self._num_leapfrog_steps

    @property
    def is_calibrated(self) -> bool:
        return False

    def _value_and_grad(self, parts):
        return value_and_gradient(self._target_log_prob_fn, parts, self._value_and_grad_fn)

    def bootstrap_results(self, init_state):
        parts, _ = as_parts(init_state)
        tlp, grads = self._value_and_grad(parts)
        return UncalibratedHamiltonianMonteCarloResults(
            log_acceptance_correction=np.zeros_like(tlp),
            target_log_prob=tlp,
            grads_target_log_prob=grads,
            step_size=step_size_parts(self._step_size, parts),
            is_divergent=np.zeros(tlp.shape, dtype=bool),
        )

    def one_step(self, current_state, previous_kernel_results, key):
        parts, was_list = as_parts(current_state)
        keys = chain_keys(key, num_chains(parts))
        momentum = sample_momentum(parts, numerics.fold_in(keys, 0))
        step_size = [np.asarray(s) for s in previous_kernel_results.step_size]
        result = leapfrog(
            parts, momentum, step_size, self._num_leapfrog_steps, self._value_and_grad,
            grads=previous_kernel_results.grads_target_log_prob)
        tlp = result.target_log_prob
        with np.errstate(invalid="ignore"):
            correction = kinetic_energy(momentum) - kinetic_energy(result.momentum)
        correction = np.where(result.is_divergent, -np.inf, correction).astype(tlp.dtype)
        results = UncalibratedHamiltonianMonteCarloResults(
            log_acceptance_correction=correction,
            target_log_prob=tlp,
            grads_target_log_prob=result.grads_target_log_prob,
            step_size=step_size,
            is_divergent=result.is_divergent,
        )
        return restore_structure(result.state, was_list), results


class HamiltonianMonteCarlo(MetropolisHastings):
    """Calibrated HMC: ``MetropolisHastings(UncalibratedHamiltonianMonteCarlo)``."""

    def __init__(self, target_log_prob_fn, step_size, num_leapfrog_steps, value_and_grad_fn=None):
        super().__init__(UncalibratedHamiltonianMonteCarlo(
            target_log_prob_fn, step_size, num_leapfrog_steps, value_and_grad_fn))
