"""Transition kernel contract and the plumbing every kernel shares.

A chain state is either a single array or a list of arrays ("parts"); every
part has the chain axis first. Kernel results are trees of named tuples,
lists, tuples and dicts whose leaves are arrays. ``one_step`` must return a
tree with the same structure and leaf dtypes as ``bootstrap_results``.
"""

from __future__ import annotations

import abc
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from batchmc import numerics
from batchmc.errors import BatchSemanticsError, ContractError

__all__ = [
    "TransitionKernel",
    "as_parts",
    "assert_same_structure",
    "call_target",
    "chain_keys",
    "finite_difference_gradient",
    "get_path",
    "nest_flatten_with_paths",
    "nest_map",
    "num_chains",
    "restore_structure",
    "set_path",
    "value_and_gradient",
]


class TransitionKernel(abc.ABC):
    """One Markov transition plus the bootstrap of its side results.

    Kernels hold configuration only. ``one_step`` is a pure function of its
    arguments: the new state and results are returned, never stored.
    """

    @abc.abstractmethod
    def one_step(self, current_state, previous_kernel_results, key):
        """Advances every chain by one transition.

        Args:
          current_state: array or list of arrays, chain axis first.
          previous_kernel_results: results tree from ``bootstrap_results`` or
            an earlier ``one_step``.
          key: ``RngKey``, either unbatched or batched over the chain axis.

        Returns:
          ``(next_state, kernel_results)`` with the same structure as the
          inputs.
        """

    @abc.abstractmethod
    def bootstrap_results(self, init_state):
        """Builds the results tree for ``init_state``."""

    @property
    def is_calibrated(self) -> bool:
        return True


# State parts -----------------------------------------------------------------


def as_parts(state) -> tuple[list[np.ndarray], bool]:
    """Returns ``(parts, was_list)`` for a single array or a list of parts."""
    if isinstance(state, (list, tuple)):
        return [np.asarray(s) for s in state], True
    return [np.asarray(state)], False


def restore_structure(parts: Sequence[np.ndarray], was_list: bool):
    return list(parts) if was_list else parts[0]


def num_chains(parts: Sequence[np.ndarray]) -> int:
    extents = {p.shape[0] if p.ndim else None for p in parts}
    if None in extents:
        raise ContractError("state parts must have a leading chain axis")
    if len(extents) != 1:
        raise ContractError(f"state parts disagree on the number of chains: {sorted(extents)}")
    return extents.pop()


def check_finite_state(parts: Sequence[np.ndarray]):
    for i, part in enumerate(parts):
        if np.issubdtype(part.dtype, np.floating) and np.isnan(part).any():
            raise ValueError(f"state part {i} contains NaN")


def chain_keys(key, n: int) -> numerics.RngKey:
    """Per-chain keys with batch shape ``[n]``.

    An unbatched key is split along the chain axis; a key already batched as
    ``[n]`` is used as is, which is what makes a single chain advanced with
    ``keys[c:c+1]`` reproduce chain ``c`` of a joint run.
    """
    key = numerics._as_key(key)
    if key.batch_shape == ():
        return numerics.split_axis(key, n)
    if key.batch_shape == (n,):
        return key
    raise ContractError(f"key batch shape {key.batch_shape} does not match {n} chains")


# Target log-prob -------------------------------------------------------------


def call_target(target_log_prob_fn: Callable, parts: Sequence[np.ndarray]) -> np.ndarray:
    """Evaluates the target once for the whole batch and checks its shape."""
    c = num_chains(parts)
    with np.errstate(all="ignore"):
        tlp = np.asarray(target_log_prob_fn(*parts))
    if tlp.shape != (c,):
        raise BatchSemanticsError(
            f"target_log_prob_fn returned shape {tlp.shape} for {c} chains; expected ({c},)")
    return tlp


def finite_difference_gradient(target_log_prob_fn, parts, tlp=None):
    """Central differences, one perturbation per event element, all chains at once.

    The step is ``cbrt(eps) * max(1, |x|)``, rounded so that ``x + h`` is
    exactly representable.
    """
    parts = [np.asarray(p) for p in parts]
    if tlp is None:
        tlp = call_target(target_log_prob_fn, parts)
    c = tlp.shape[0]
    grads = []
    for j, part in enumerate(parts):
        eps = np.finfo(part.dtype).eps if np.issubdtype(part.dtype, np.floating) else np.finfo(float).eps
        flat = part.reshape(c, -1).astype(np.result_type(part.dtype, np.float32))
        grad = np.empty_like(flat)
        for e in range(flat.shape[1]):
            x = flat[:, e]
            h = np.cbrt(eps) * np.maximum(1.0, np.abs(x))
            up, down = flat.copy(), flat.copy()
            up[:, e] = x + h
            down[:, e] = x - h
            dx = up[:, e] - down[:, e]
            f_up = call_target(target_log_prob_fn, parts[:j] + [up.reshape(part.shape)] + parts[j + 1:])
            f_down = call_target(target_log_prob_fn, parts[:j] + [down.reshape(part.shape)] + parts[j + 1:])
            with np.errstate(all="ignore"):
                grad[:, e] = (f_up - f_down) / dx
        grads.append(grad.reshape(part.shape))
    return grads


def value_and_gradient(target_log_prob_fn, parts, value_and_grad_fn=None):
    """Returns ``(tlp, grads)``; uses the analytic route when one is given."""
    parts = [np.asarray(p) for p in parts]
    if value_and_grad_fn is None:
        tlp = call_target(target_log_prob_fn, parts)
        return tlp, finite_difference_gradient(target_log_prob_fn, parts, tlp)
    with np.errstate(all="ignore"):
        tlp, grads = value_and_grad_fn(*parts)
    tlp = np.asarray(tlp)
    c = num_chains(parts)
    if tlp.shape != (c,):
        raise BatchSemanticsError(
            f"value_and_grad_fn returned shape {tlp.shape} for {c} chains; expected ({c},)")
    if not isinstance(grads, (list, tuple)):
        grads = [grads]
    if len(grads) != len(parts):
        raise ContractError(f"expected {len(parts)} gradient parts, got {len(grads)}")
    grads = [np.broadcast_to(np.asarray(g), p.shape).astype(p.dtype, copy=False)
             for g, p in zip(grads, parts)]
    return tlp, grads


# Result trees ----------------------------------------------------------------


def _is_namedtuple(x) -> bool:
    return isinstance(x, tuple) and hasattr(x, "_fields")


def _children(node) -> list[tuple[str, Any]] | None:
    if _is_namedtuple(node):
        return [(name, getattr(node, name)) for name in node._fields]
    if isinstance(node, (list, tuple)):
        return [(str(i), v) for i, v in enumerate(node)]
    if isinstance(node, dict):
        return [(str(k), node[k]) for k in sorted(node)]
    return None


def nest_flatten_with_paths(tree, prefix: str = "") -> Iterator[tuple[str, Any]]:
    children = _children(tree)
    if children is None:
        yield prefix, tree
        return
    for name, child in children:
        yield from nest_flatten_with_paths(child, f"{prefix}/{name}" if prefix else name)


def _node_signature(node):
    if _is_namedtuple(node):
        return (type(node).__name__, tuple(node._fields))
    if isinstance(node, list):
        return ("list", len(node))
    if isinstance(node, tuple):
        return ("tuple", len(node))
    if isinstance(node, dict):
        return ("dict", tuple(sorted(node)))
    return None


def assert_same_structure(expected, actual, check_dtypes: bool = True, path: str = ""):
    """Raises :class:`ContractError` naming the first mismatching path."""
    where = path or "<root>"
    sig_e, sig_a = _node_signature(expected), _node_signature(actual)
    if sig_e != sig_a:
        raise ContractError(f"structure mismatch at {where}: {sig_e} vs {sig_a}")
    if sig_e is None:
        if check_dtypes:
            de, da = np.asarray(expected).dtype, np.asarray(actual).dtype
            if de != da:
                raise ContractError(f"dtype mismatch at {where}: {de} vs {da}")
        return
    for (name, e), (_, a) in zip(_children(expected), _children(actual)):
        assert_same_structure(e, a, check_dtypes, f"{path}/{name}" if path else name)


def nest_map(fn: Callable, *trees):
    """Maps ``fn`` over matching leaves of structurally identical trees."""
    first = trees[0]
    if _is_namedtuple(first):
        return type(first)(*(nest_map(fn, *(getattr(t, f) for t in trees)) for f in first._fields))
    if isinstance(first, (list, tuple)):
        return type(first)(nest_map(fn, *children) for children in zip(*trees))
    if isinstance(first, dict):
        return {k: nest_map(fn, *(t[k] for t in trees)) for k in first}
    return fn(*trees)


def _split_path(path: str) -> list[str]:
    return [p for p in path.split("/") if p]


def _child(node, name: str):
    if _is_namedtuple(node):
        if name not in node._fields:
            raise KeyError(name)
        return getattr(node, name)
    if isinstance(node, (list, tuple)):
        return node[int(name)]
    if isinstance(node, dict):
        return node[name]
    raise KeyError(name)


def get_path(tree, path: str):
    """Looks up a leaf or subtree by a slash-separated path."""
    node = tree
    for name in _split_path(path):
        try:
            node = _child(node, name)
        except (KeyError, IndexError, ValueError):
            raise ContractError(f"kernel results have no entry at path {path!r}") from None
    return node


def has_path(tree, path: str) -> bool:
    try:
        get_path(tree, path)
    except ContractError:
        return False
    return True


def set_path(tree, path: str, value):
    """Returns a copy of ``tree`` with the entry at ``path`` replaced."""
    names = _split_path(path)
    if not names:
        return value
    head, rest = names[0], "/".join(names[1:])
    try:
        child = _child(tree, head)
    except (KeyError, IndexError, ValueError):
        raise ContractError(f"kernel results have no entry at path {path!r}") from None
    new_child = set_path(child, rest, value)
    if _is_namedtuple(tree):
        return tree._replace(**{head: new_child})
    if isinstance(tree, (list, tuple)):
        items = list(tree)
        items[int(head)] = new_child
        return type(tree)(items)
    out = dict(tree)
    out[head] = new_child
    return out


def select_per_chain(mask: np.ndarray, on_true, on_false):
    """Chain-wise selection between two results trees of equal structure.

    Leaves with a leading axis of the chain extent are selected per chain.
    Other leaves (shared step sizes, counters) must agree between the two
    trees and are taken from ``on_true``.
    """
    c = mask.shape[0]

    def _select(a, b):
        a, b = np.asarray(a), np.asarray(b)
        if a.ndim >= 1 and a.shape[0] == c and a.shape == b.shape:
            return numerics.select(numerics.left_justified_expand_dims_like(mask, a), a, b)
        return a

    return nest_map(_select, on_true, on_false)
