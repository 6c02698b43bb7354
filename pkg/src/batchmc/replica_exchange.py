"""Replica exchange Monte Carlo (parallel tempering).

Replicas live on an extra leading axis, so the state carried in the
results has shape ``[K, C, ...]``. For the inner kernel the two axes are
flattened into one batch of ``K * C`` chains and the target is scaled by
broadcasting the inverse temperatures against it; the inner kernel never
knows replicas exist.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from batchmc import numerics
from batchmc.errors import ContractError
from batchmc.kernel import (
    TransitionKernel,
    as_parts,
    chain_keys,
    check_finite_state,
    get_path,
    nest_flatten_with_paths,
    nest_map,
    num_chains,
    restore_structure,
)

__all__ = [
    "ReplicaExchangeMC",
    "ReplicaExchangeMCResults",
    "make_replica_target_log_prob_fn",
]


class ReplicaExchangeMCResults(NamedTuple):
    replica_states: object
    replica_results: object
    replica_base_target_log_prob: np.ndarray
    is_swap_proposed: np.ndarray
    is_swap_accepted: np.ndarray
    swap_log_accept_ratio: np.ndarray
    step: np.ndarray


def _check_inverse_temperatures(inverse_temperatures) -> np.ndarray:
    betas = np.asarray(inverse_temperatures, dtype=np.float64)
    if betas.ndim != 1 or betas.size == 0:
        raise ValueError("inverse_temperatures must be a non-empty vector")
    if abs(betas[0] - 1.0) > 1e-12:
        raise ValueError(f"the first inverse temperature must be 1, got {betas[0]}")
    if np.any(betas <= 0) or np.any(np.diff(betas) >= 0):
        raise ValueError(f"inverse temperatures must be positive and strictly decreasing: {betas}")
    return betas


def make_replica_target_log_prob_fn(target_log_prob_fn: Callable, inverse_temperatures) -> Callable:
    """Tempered target over states with leading axes ``[K, C]``.

    Returns ``beta[k] * target_log_prob_fn(x[k, c])`` with shape ``[K, C]``,
    computed with one call of the base target over the flattened batch.
    """
    betas = _check_inverse_temperatures(inverse_temperatures)
    k = betas.shape[0]

    def _replica_target_log_prob(*parts):
        parts = [np.asarray(p) for p in parts]
        if parts[0].ndim < 2 or parts[0].shape[0] != k:
            raise ContractError(f"replica states need leading axes [{k}, C], got {parts[0].shape}")
        c = parts[0].shape[1]
        flat = [p.reshape((k * c,) + p.shape[2:]) for p in parts]
        tlp = np.asarray(target_log_prob_fn(*flat)).reshape(k, c)
        broadcastable = numerics.left_justified_expand_dims_like(betas, tlp)
        return broadcastable.astype(tlp.dtype) * tlp

    return _replica_target_log_prob


def _flat_scaled(fn, betas, grads: bool):
    k = betas.shape[0]

    def _scale(n, dtype):
        return np.repeat(betas, n // k).astype(dtype)

    if not grads:
        def _tlp(*parts):
            tlp = np.asarray(fn(*parts))
            return _scale(tlp.shape[0], tlp.dtype) * tlp
        return _tlp

    def _value_and_grad(*parts):
        tlp, g = fn(*parts)
        tlp = np.asarray(tlp)
        scale = _scale(tlp.shape[0], tlp.dtype)
        g = g if isinstance(g, (list, tuple)) else [g]
        return scale * tlp, [numerics.left_justified_expand_dims_like(scale, gi) * gi for gi in g]
    return _value_and_grad


def _find_target_log_prob_path(results) -> str:
    paths = [path for path, _ in nest_flatten_with_paths(results)
             if path.split("/")[-1] == "target_log_prob" and "proposed" not in path]
    if not paths:
        raise ContractError("inner kernel results carry no target_log_prob leaf")
    return min(paths, key=lambda p: (p.count("/"), p))


class ReplicaExchangeMC(TransitionKernel):
    """Parallel tempering over ``K`` inverse temperatures ``1 = b_1 > ... > b_K``.

    Swaps between adjacent replicas alternate between even pairs
    ``(0,1), (2,3), ...`` and odd pairs ``(1,2), (3,4), ...`` on successive
    steps. A swap of replicas ``a < b`` at chain ``c`` is accepted with
    ``log alpha = (b_a - b_b) * (tlp(x_b) - tlp(x_a))`` in the untempered
    target.

    Args:
      target_log_prob_fn: batched base target.
      inverse_temperatures: length-``K`` decreasing, starting at 1.
      make_kernel_fn: builds the inner kernel from the tempered target. When
        ``value_and_grad_fn`` is given it is called as
        ``make_kernel_fn(tlp, value_and_grad)``.
      value_and_grad_fn: optional analytic gradient of the base target.
    """

    def __init__(self, target_log_prob_fn, inverse_temperatures, make_kernel_fn,
                 value_and_grad_fn=None):
        self._target_log_prob_fn = target_log_prob_fn
        self._betas = _check_inverse_temperatures(inverse_temperatures)
        scaled_tlp = _flat_scaled(target_log_prob_fn, self._betas, grads=False)
        if value_and_grad_fn is None:
            self._inner_kernel = make_kernel_fn(scaled_tlp)
        else:
            self._inner_kernel = make_kernel_fn(
                scaled_tlp, _flat_scaled(value_and_grad_fn, self._betas, grads=True))

    @property
    def inner_kernel(self) -> TransitionKernel:
        return self._inner_kernel

    @property
    def inverse_temperatures(self) -> np.ndarray:
        return self._betas

    @property
    def num_replicas(self) -> int:
        return self._betas.shape[0]

    @property
    def is_calibrated(self) -> bool:
        return self._inner_kernel.is_calibrated

    def _flatten(self, parts):
        return [p.reshape((-1,) + p.shape[2:]) for p in parts]

    def _unflatten(self, parts, c):
        return [p.reshape((self.num_replicas, c) + p.shape[1:]) for p in parts]

    def _base_tlp(self, inner_results, c):
        scaled = np.asarray(get_path(inner_results, _find_target_log_prob_path(inner_results)))
        betas = self._betas.astype(scaled.dtype)
        return scaled.reshape(self.num_replicas, c) / betas[:, None]

    def bootstrap_results(self, init_state):
        parts, was_list = as_parts(init_state)
        check_finite_state(parts)
        c = num_chains(parts)
        k = self.num_replicas
        replicas = [np.ascontiguousarray(np.broadcast_to(p, (k,) + p.shape)) for p in parts]
        flat_state = restore_structure(self._flatten(replicas), was_list)
        inner = self._inner_kernel.bootstrap_results(flat_state)
        base = self._base_tlp(inner, c)
        return ReplicaExchangeMCResults(
            replica_states=restore_structure(replicas, was_list),
            replica_results=inner,
            replica_base_target_log_prob=base,
            is_swap_proposed=np.zeros((k - 1, c), dtype=bool),
            is_swap_accepted=np.zeros((k - 1, c), dtype=bool),
            swap_log_accept_ratio=np.zeros((k - 1, c), dtype=base.dtype),
            step=np.asarray(0, dtype=np.int64),
        )

    def _keys(self, key, c):
        key = numerics._as_key(key)
        k = self.num_replicas
        if key.batch_shape == ():
            inner_key, swap_key = numerics.split(key, 2)
            return inner_key, chain_keys(swap_key, c)
        keys = chain_keys(key, c)
        inner = numerics.RngKey(np.stack([numerics.fold_in(keys, r).data for r in range(k)]))
        return inner.reshape(k * c), numerics.fold_in(keys, k)

    def one_step(self, current_state, previous_kernel_results, key):
        _, was_list = as_parts(current_state)
        replicas, _ = as_parts(previous_kernel_results.replica_states)
        k = self.num_replicas
        c = replicas[0].shape[1]
        if as_parts(current_state)[0][0].shape[0] != c:
            raise ContractError("current_state chain extent does not match the replica states")
        inner_key, swap_keys = self._keys(key, c)

        flat_state = restore_structure(self._flatten(replicas), was_list)
        new_flat, inner = self._inner_kernel.one_step(
            flat_state, previous_kernel_results.replica_results, inner_key)
        new_flat_parts, _ = as_parts(new_flat)
        if new_flat_parts[0].shape[0] != k * c:
            raise ContractError("inner kernel changed the number of chains")
        replicas = self._unflatten(new_flat_parts, c)
        base = self._base_tlp(inner, c)
        dtype = base.dtype

        step = np.asarray(previous_kernel_results.step)
        parity = int(step) % 2
        pair = np.arange(k - 1)
        proposed = np.broadcast_to((pair % 2 == parity)[:, None], (k - 1, c))
        betas = self._betas.astype(dtype)
        with np.errstate(invalid="ignore"):
            log_alpha = (betas[:-1, None] - betas[1:, None]) * (base[1:] - base[:-1])
        log_alpha = np.where(np.isnan(log_alpha), -np.inf, log_alpha)
        u = numerics.sample_uniform(swap_keys, (c, max(k - 1, 1)), dtype)[:, : k - 1].T
        with np.errstate(divide="ignore"):
            accepted = proposed & (np.log(u) < np.minimum(0.0, log_alpha))

        perm = np.broadcast_to(np.arange(k)[:, None], (k, c)).copy()
        lower, chains = np.nonzero(accepted)
        perm[lower, chains] = lower + 1
        perm[lower + 1, chains] = lower

        replicas = [np.take_along_axis(p, perm.reshape(perm.shape + (1,) * (p.ndim - 2)), axis=0)
                    for p in replicas]
        new_base = np.take_along_axis(base, perm, axis=0)
        ratio = (betas[:, None] / betas[perm]).reshape(-1)
        rescaled_tlp = (betas[:, None] * new_base).reshape(-1)
        inner = _permute_results(inner, perm, ratio, rescaled_tlp, k * c)

        results = ReplicaExchangeMCResults(
            replica_states=restore_structure(replicas, was_list),
            replica_results=inner,
            replica_base_target_log_prob=new_base,
            is_swap_proposed=np.array(proposed),
            is_swap_accepted=accepted,
            swap_log_accept_ratio=np.where(proposed, log_alpha, 0.0).astype(dtype),
            step=step + 1,
        )
        return restore_structure([p[0] for p in replicas], was_list), results


def _permute_results(tree, perm, ratio, rescaled_tlp, n):
    """Applies the replica permutation to every per-chain leaf of ``tree``.

    Leaves named ``target_log_prob`` are replaced by the tempered target of
    the new occupant and gradient leaves are rescaled by the ratio of the
    inverse temperatures.
    """
    k, c = perm.shape
    flat = dict(nest_flatten_with_paths(tree))
    new_leaves = {}
    for path, leaf in flat.items():
        leaf = np.asarray(leaf)
        if leaf.ndim == 0 or leaf.shape[0] != n:
            new_leaves[path] = leaf
            continue
        shaped = leaf.reshape((k, c) + leaf.shape[1:])
        idx = perm.reshape(perm.shape + (1,) * (shaped.ndim - 2))
        moved = np.take_along_axis(shaped, idx, axis=0).reshape(leaf.shape)
        name = path.split("/")
        if name[-1] == "target_log_prob":
            moved = rescaled_tlp.astype(leaf.dtype)
        elif "grads_target_log_prob" in name:
            moved = (numerics.left_justified_expand_dims_like(ratio, moved) * moved).astype(leaf.dtype)
        new_leaves[path] = moved
    paths = iter(new_leaves[p] for p in flat)
    return nest_map(lambda _: next(paths), tree)
