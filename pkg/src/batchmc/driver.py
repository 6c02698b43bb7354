"""The ``sample_chain`` driver: bootstrap, burn-in, sampling and tracing."""

from __future__ import annotations

import warnings
from typing import Callable, NamedTuple

import numpy as np

from batchmc import numerics
from batchmc.errors import ContractError
from batchmc.kernel import (
    TransitionKernel,
    as_parts,
    assert_same_structure,
    nest_flatten_with_paths,
    nest_map,
    restore_structure,
)

__all__ = ["SampleChainResult", "sample_chain", "step_keys"]


class SampleChainResult(NamedTuple):
    all_states: object
    trace: object
    final_kernel_results: object
    final_state: object
    final_key: numerics.RngKey


def _no_trace(state, kernel_results):
    return ()


def step_keys(key: numerics.RngKey):
    """Yields one key per iteration; the carried key is the continuation."""
    while True:
        key, step = numerics.split(key, 2)
        yield key, step


def sample_chain(
    num_results: int,
    current_state,
    kernel: TransitionKernel,
    num_burnin_steps: int = 0,
    trace_fn: Callable = _no_trace,
    seed=0,
    previous_kernel_results=None,
) -> SampleChainResult:
    """Runs ``kernel`` for ``num_burnin_steps + num_results`` steps.

    Burn-in states are discarded. For each kept step, the state and
    ``trace_fn(state, kernel_results)`` are written into preallocated
    arrays with a leading ``[num_results]`` axis.

    The key carried between iterations is returned as ``final_key``; passing
    it back as ``seed`` together with ``final_state`` and
    ``final_kernel_results`` continues the exact same stream, so a run split
    in two pieces concatenates bitwise to a single run.

    Args:
      num_results: number of stored draws.
      current_state: initial state (array or list of arrays).
      kernel: a calibrated ``TransitionKernel``.
      num_burnin_steps: steps run before storage begins.
      trace_fn: ``(state, kernel_results) -> tree of arrays``.
      seed: integer seed or ``RngKey``.
      previous_kernel_results: resume from these instead of bootstrapping.

    Returns:
      A ``SampleChainResult``.
    """
    num_results = int(num_results)
    num_burnin_steps = int(num_burnin_steps)
    if num_results < 0 or num_burnin_steps < 0:
        raise ValueError("num_results and num_burnin_steps must be non-negative")
    if not kernel.is_calibrated:
        warnings.warn(
            f"{type(kernel).__name__} is not calibrated; wrap it in MetropolisHastings",
            stacklevel=2)

    key = numerics._as_key(seed)
    state = current_state
    if previous_kernel_results is None:
        results = kernel.bootstrap_results(state)
    else:
        results = previous_kernel_results
    reference_results = results

    keys = step_keys(key)
    for _ in range(num_burnin_steps):
        key, step = next(keys)
        state, results = _checked_step(kernel, state, results, step, reference_results)

    parts, was_list = as_parts(state)
    storage = [np.empty((num_results,) + p.shape, dtype=p.dtype) for p in parts]
    trace_storage = None
    trace_reference = None
    if num_results == 0:
        trace_storage = trace_fn(state, results)
        trace_storage = nest_map(
            lambda leaf: np.empty((0,) + np.shape(leaf), dtype=np.asarray(leaf).dtype), trace_storage)

    for i in range(num_results):
        key, step = next(keys)
        state, results = _checked_step(kernel, state, results, step, reference_results)
        for buf, part in zip(storage, as_parts(state)[0]):
            buf[i] = part
        traced = trace_fn(state, results)
        if trace_storage is None:
            trace_reference = traced
            trace_storage = nest_map(
                lambda leaf: np.empty((num_results,) + np.shape(leaf), dtype=np.asarray(leaf).dtype),
                traced)
        else:
            try:
                assert_same_structure(trace_reference, traced)
            except ContractError as err:
                raise ContractError(f"trace_fn output changed at iteration {i}: {err}") from None
        for (_, buf), (path, leaf) in zip(nest_flatten_with_paths(trace_storage),
                                          nest_flatten_with_paths(traced)):
            leaf = np.asarray(leaf)
            if buf.shape[1:] != leaf.shape:
                raise ContractError(
                    f"trace_fn leaf {path or '<root>'} changed shape at iteration {i}")
            buf[i] = leaf

    return SampleChainResult(
        all_states=restore_structure(storage, was_list),
        trace=trace_storage,
        final_kernel_results=results,
        final_state=state,
        final_key=key,
    )


def _checked_step(kernel, state, results, key, reference):
    new_state, new_results = kernel.one_step(state, results, key)
    assert_same_structure(reference, new_results)
    return new_state, new_results
