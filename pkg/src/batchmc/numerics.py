"""Batched array helpers and a counter-based splittable RNG.

Arrays are plain ``numpy.ndarray`` values whose leading axis indexes chains.
Everything here is elementwise or reduces over trailing (event) axes only;
nothing reduces over the chain axis.

Randomness comes from Philox4x32-10 keyed by an explicit :class:`RngKey`.
A key may carry a batch shape, in which case every batch element owns an
independent stream and draws for element ``c`` are bitwise identical to the
draws an unbatched key ``key[c]`` would produce.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from batchmc.errors import ShapeError

__all__ = [
    "DEFAULT_DTYPE",
    "RngKey",
    "broadcast_shapes",
    "fold_in",
    "left_justified_expand_dims_like",
    "left_justified_expand_dims_to",
    "log_sum_exp",
    "random_bits",
    "reduce_max_event",
    "reduce_sum_event",
    "sample_standard_normal",
    "sample_uniform",
    "select",
    "split",
    "split_axis",
]

DEFAULT_DTYPE = np.float64

_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = np.uint64(0x9E3779B9)
_PHILOX_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

# Counter word 3 separates the uses of a key so they never share a block.
_TAG_BITS = 0
_TAG_SPLIT = 1
_TAG_FOLD = 2


def philox4x32_reference(counter: np.ndarray, key: np.ndarray, rounds: int = 10) -> np.ndarray:
    """Philox4x32 block function written with numpy ufuncs.

    Args:
      counter: uint32 array with trailing axis of size 4.
      key: uint32 array with trailing axis of size 2, broadcastable against
        ``counter[..., :2]``.
      rounds: number of rounds; 10 is the standard variant.

    Returns:
      uint32 array of the broadcast shape with trailing axis 4.
    """
    c0, c1, c2, c3 = (counter[..., i].astype(np.uint64) for i in range(4))
    k0 = key[..., 0].astype(np.uint64)
    k1 = key[..., 1].astype(np.uint64)
    for _ in range(rounds):
        p0 = _PHILOX_M0 * c0
        p1 = _PHILOX_M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT32) ^ c1 ^ k0,
            p1 & _MASK32,
            (p0 >> _SHIFT32) ^ c3 ^ k1,
            p0 & _MASK32,
        )
        k0 = (k0 + _PHILOX_W0) & _MASK32
        k1 = (k1 + _PHILOX_W1) & _MASK32
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    return np.stack([c0, c1, c2, c3], axis=-1).astype(np.uint32)


try:
    import numba
except ImportError:  # pragma: no cover - numba ships with the supported environment
    numba = None

if numba is not None:

    @numba.njit(cache=True)
    def _philox_rows(ctr, key, out):  # pragma: no cover - compiled
        for i in range(ctr.shape[0]):
            c0 = np.uint64(ctr[i, 0])
            c1 = np.uint64(ctr[i, 1])
            c2 = np.uint64(ctr[i, 2])
            c3 = np.uint64(ctr[i, 3])
            k0 = np.uint64(key[i, 0])
            k1 = np.uint64(key[i, 1])
            for _ in range(10):
                p0 = np.uint64(0xD2511F53) * c0
                p1 = np.uint64(0xCD9E8D57) * c2
                c0, c1, c2, c3 = (
                    (p1 >> np.uint64(32)) ^ c1 ^ k0,
                    p1 & np.uint64(0xFFFFFFFF),
                    (p0 >> np.uint64(32)) ^ c3 ^ k1,
                    p0 & np.uint64(0xFFFFFFFF),
                )
                k0 = (k0 + np.uint64(0x9E3779B9)) & np.uint64(0xFFFFFFFF)
                k1 = (k1 + np.uint64(0xBB67AE85)) & np.uint64(0xFFFFFFFF)
            out[i, 0] = c0
            out[i, 1] = c1
            out[i, 2] = c2
            out[i, 3] = c3


def philox4x32(counter: np.ndarray, key: np.ndarray) -> np.ndarray:
    """Philox4x32-10; compiled when numba is available, else the numpy path."""
    if numba is None:
        return philox4x32_reference(counter, key)
    batch = np.broadcast_shapes(counter.shape[:-1], key.shape[:-1])
    ctr = np.ascontiguousarray(np.broadcast_to(counter, batch + (4,)), dtype=np.uint32).reshape(-1, 4)
    k = np.ascontiguousarray(np.broadcast_to(key, batch + (2,)), dtype=np.uint32).reshape(-1, 2)
    out = np.empty((ctr.shape[0], 4), dtype=np.uint32)
    _philox_rows(ctr, k, out)
    return out.reshape(batch + (4,))


@dataclasses.dataclass(frozen=True, eq=False)
class RngKey:
    """Handle on a deterministic random stream (or a batch of streams).

    ``data`` is a uint32 array of shape ``batch_shape + (2,)``.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.uint32)
        if data.ndim < 1 or data.shape[-1] != 2:
            raise ShapeError(f"key data must have trailing axis 2, got {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_seed(cls, seed: int) -> "RngKey":
        seed = int(seed)
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be in [0, 2**64), got {seed}")
        return cls(np.array([seed & 0xFFFFFFFF, seed >> 32], dtype=np.uint32))

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.data.shape[:-1]

    def __getitem__(self, index) -> "RngKey":
        if not self.batch_shape:
            raise IndexError("cannot index an unbatched key")
        if not isinstance(index, tuple):
            index = (index,)
        return RngKey(self.data[index + (slice(None),)])

    def reshape(self, *batch_shape) -> "RngKey":
        if len(batch_shape) == 1 and isinstance(batch_shape[0], (tuple, list)):
            batch_shape = tuple(batch_shape[0])
        return RngKey(self.data.reshape(tuple(batch_shape) + (2,)))

    def __eq__(self, other):
        if not isinstance(other, RngKey):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.all(self.data == other.data))

    def __hash__(self):
        return hash((self.data.shape, self.data.tobytes()))

    def __repr__(self):
        if not self.batch_shape:
            return f"RngKey({int(self.data[0]):#010x}, {int(self.data[1]):#010x})"
        return f"RngKey(batch_shape={self.batch_shape})"


def _as_key(key) -> RngKey:
    if isinstance(key, RngKey):
        return key
    if isinstance(key, (int, np.integer)):
        return RngKey.from_seed(int(key))
    raise TypeError(f"expected RngKey or int seed, got {type(key).__name__}")


def _counters(index: np.ndarray, tag: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.uint64)
    ctr = np.zeros(index.shape + (4,), dtype=np.uint32)
    ctr[..., 0] = (index & _MASK32).astype(np.uint32)
    ctr[..., 1] = (index >> _SHIFT32).astype(np.uint32)
    ctr[..., 3] = tag
    return ctr


def split_axis(key: RngKey, n: int) -> RngKey:
    """Derives ``n`` child keys, stacked on a new trailing batch axis.

    Child ``i`` depends only on ``(key, i)``, so growing ``n`` never changes
    the children that already existed.
    """
    key = _as_key(key)
    n = int(n)
    if n < 1:
        raise ValueError(f"split requires n >= 1, got {n}")
    ctr = _counters(np.arange(n), _TAG_SPLIT)
    out = philox4x32(ctr, key.data[..., None, :])
    return RngKey(out[..., :2])


def split(key: RngKey, n: int = 2) -> list[RngKey]:
    """Splits ``key`` into a list of ``n`` independent keys."""
    keys = split_axis(key, n)
    return [RngKey(keys.data[..., i, :]) for i in range(n)]


def fold_in(key: RngKey, data: int) -> RngKey:
    """Derives a key from ``key`` and an integer tag (per batch element)."""
    key = _as_key(key)
    ctr = _counters(np.asarray(data), _TAG_FOLD)
    return RngKey(philox4x32(ctr, key.data)[..., :2])


def _event_shape(key: RngKey, shape) -> tuple[tuple[int, ...], int]:
    shape = (int(shape),) if np.ndim(shape) == 0 else tuple(int(s) for s in shape)
    batch = key.batch_shape
    if tuple(shape[: len(batch)]) != batch:
        raise ShapeError(
            f"sample shape {shape} must start with the key batch shape {batch}")
    event = tuple(shape[len(batch):])
    return event, int(np.prod(event, dtype=np.int64))


def random_bits(key: RngKey, num_words: int) -> np.ndarray:
    """Returns ``key.batch_shape + (num_words,)`` uint32 words."""
    key = _as_key(key)
    num_blocks = -(-int(num_words) // 4)
    ctr = _counters(np.arange(num_blocks), _TAG_BITS)
    words = philox4x32(ctr, key.data[..., None, :])
    return words.reshape(key.batch_shape + (num_blocks * 4,))[..., :num_words]


def _uniform53(key: RngKey, shape) -> tuple[np.ndarray, tuple[int, ...]]:
    event, size = _event_shape(key, shape)
    words = random_bits(key, 2 * size).astype(np.uint64)
    hi = words[..., 0::2] >> np.uint64(5)
    lo = words[..., 1::2] >> np.uint64(6)
    ints = hi * np.uint64(1 << 26) + lo
    return ints, key.batch_shape + event


def sample_uniform(key: RngKey, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Uniform draws on ``[0, 1)``.

    If ``key`` is batched, ``shape`` must start with ``key.batch_shape``.
    """
    key = _as_key(key)
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        event, size = _event_shape(key, shape)
        words = random_bits(key, size)
        out = (words >> np.uint32(8)).astype(np.float32) * np.float32(2.0**-24)
        return out.reshape(key.batch_shape + event)
    ints, full_shape = _uniform53(key, shape)
    return (ints.astype(np.float64) * 2.0**-53).reshape(full_shape).astype(dtype)


def sample_standard_normal(key: RngKey, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Standard normal draws by inverse-CDF of an open-interval uniform."""
    key = _as_key(key)
    ints, full_shape = _uniform53(key, shape)
    u = (ints.astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u).reshape(full_shape).astype(np.dtype(dtype))


def broadcast_shapes(*shapes: Sequence[int]) -> tuple[int, ...]:
    """Right-aligned broadcast of shapes; raises :class:`ShapeError`."""
    rank = max((len(s) for s in shapes), default=0)
    out = [1] * rank
    for shape in shapes:
        padded = (1,) * (rank - len(shape)) + tuple(int(s) for s in shape)
        for i, extent in enumerate(padded):
            if extent == out[i] or extent == 1:
                continue
            if out[i] == 1:
                out[i] = extent
            else:
                raise ShapeError(f"shapes {[tuple(s) for s in shapes]} are not broadcast-compatible")
    return tuple(out)


def left_justified_expand_dims_to(a, rank: int) -> np.ndarray:
    """Pads the shape of ``a`` with trailing 1s up to ``rank``."""
    a = np.asarray(a)
    if a.ndim > rank:
        raise ShapeError(f"cannot pad rank {a.ndim} array down to rank {rank}")
    return a.reshape(a.shape + (1,) * (rank - a.ndim))


def left_justified_expand_dims_like(a, reference) -> np.ndarray:
    """Pads ``a`` on the right with 1s until its rank matches ``reference``.

    The result broadcasts against ``reference`` along the leading axes, which
    is what lets a per-chain (or per-replica) vector scale a batch of events.
    """
    return left_justified_expand_dims_to(a, np.ndim(reference))


def select(mask, on_true, on_false) -> np.ndarray:
    """Elementwise ``on_true if mask else on_false`` over the broadcast shape.

    Both branches are already evaluated by the caller, so the cost is the
    same for every batch element.
    """
    mask = np.asarray(mask)
    on_true = np.asarray(on_true)
    on_false = np.asarray(on_false)
    if mask.dtype != np.bool_:
        raise TypeError(f"mask must be boolean, got {mask.dtype}")
    if on_true.dtype != on_false.dtype:
        raise TypeError(f"branch dtypes differ: {on_true.dtype} vs {on_false.dtype}")
    broadcast_shapes(mask.shape, on_true.shape, on_false.shape)
    return np.where(mask, on_true, on_false)


def log_sum_exp(a, axis=-1) -> np.ndarray:
    """Max-shifted ``log(sum(exp(a)))`` along ``axis``.

    An all ``-inf`` slice gives ``-inf`` rather than NaN.
    """
    a = np.asarray(a)
    if a.ndim == 0:
        raise ShapeError("log_sum_exp needs at least one axis")
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.ndim}")
    m = np.max(a, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - shift), axis=axis, keepdims=True)) + shift
    return np.squeeze(out, axis=axis)


def _event_view(x, batch_ndims: int) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < batch_ndims:
        raise ShapeError(f"rank {x.ndim} array has fewer than {batch_ndims} batch axes")
    return np.ascontiguousarray(x).reshape(x.shape[:batch_ndims] + (-1,))


def reduce_sum_event(x, batch_ndims: int = 1) -> np.ndarray:
    """Sums over every axis after the first ``batch_ndims`` axes.

    Each batch element is reduced as one contiguous row, so the result for a
    chain does not depend on how many other chains share the batch.
    """
    return np.sum(_event_view(x, batch_ndims), axis=-1)


def reduce_max_event(x, batch_ndims: int = 1) -> np.ndarray:
    return np.max(_event_view(x, batch_ndims), axis=-1)
