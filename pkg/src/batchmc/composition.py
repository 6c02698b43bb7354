"""Kernel wrappers: bijector-transformed kernels and simple step-size adaptation.

Built-in bijectors are elementwise, so ``forward_log_det_jacobian`` is the
sum of a per-element log derivative over every non-chain axis of a part.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from batchmc import numerics
from batchmc.errors import ContractError
from batchmc.kernel import (
    TransitionKernel,
    as_parts,
    call_target,
    get_path,
    has_path,
    nest_flatten_with_paths,
    restore_structure,
    set_path,
)

__all__ = [
    "Affine",
    "Bijector",
    "Exp",
    "Identity",
    "SimpleStepSizeAdaptation",
    "SimpleStepSizeAdaptationResults",
    "Softplus",
    "TransformedResults",
    "TransformedTransitionKernel",
]


class Bijector:
    """Elementwise smooth invertible map from unconstrained ``y`` to ``x``.

    Subclasses implement ``forward``, ``inverse``, the per-element
    ``_log_derivative`` and its derivative ``_log_derivative_grad``, plus
    ``forward_derivative`` (dx/dy) for the chain rule. Out-of-domain inputs
    give NaN or -inf instead of raising, so a target evaluated there simply
    rejects.
    """

    name = "bijector"

    def forward(self, y):
        raise NotImplementedError

    def inverse(self, x):
        raise NotImplementedError

    def forward_derivative(self, y):
        raise NotImplementedError

    def _log_derivative(self, y):
        raise NotImplementedError

    def _log_derivative_grad(self, y):
        raise NotImplementedError

    def forward_log_det_jacobian(self, y, batch_ndims: int = 1):
        """``log|det dx/dy|`` summed over the event axes of ``y``."""
        y = np.asarray(y)
        with np.errstate(all="ignore"):
            per_element = np.broadcast_to(self._log_derivative(y), y.shape)
        return numerics.reduce_sum_event(per_element, batch_ndims)

    def inverse_log_det_jacobian(self, x, batch_ndims: int = 1):
        with np.errstate(all="ignore"):
            return -self.forward_log_det_jacobian(self.inverse(x), batch_ndims)

    def forward_log_det_jacobian_grad(self, y):
        """Elementwise gradient of the log determinant with respect to ``y``."""
        y = np.asarray(y)
        return np.broadcast_to(self._log_derivative_grad(y), y.shape)

    def __repr__(self):
        return f"{type(self).__name__}()"


class Identity(Bijector):
    name = "identity"

    def forward(self, y):
        return np.asarray(y)

    def inverse(self, x):
        return np.asarray(x)

    def forward_derivative(self, y):
        return np.ones_like(y)

    def _log_derivative(self, y):
        return np.zeros_like(y)

    def _log_derivative_grad(self, y):
        return np.zeros_like(y)


class Exp(Bijector):
    """``x = exp(y)``; maps the real line onto ``x > 0``."""

    name = "exp"

    def forward(self, y):
        return np.exp(y)

    def inverse(self, x):
        with np.errstate(all="ignore"):
            return np.log(x)

    def forward_derivative(self, y):
        return np.exp(y)

    def _log_derivative(self, y):
        return np.asarray(y)

    def _log_derivative_grad(self, y):
        return np.ones_like(y)


class Softplus(Bijector):
    """``x = log(1 + exp(y))``; maps the real line onto ``x > 0``."""

    name = "softplus"

    def forward(self, y):
        return np.logaddexp(0.0, y)

    def inverse(self, x):
        x = np.asarray(x)
        # log(expm1(x)) without overflow for large x.
        with np.errstate(all="ignore"):
            return x + np.log(-np.expm1(-x))

    def forward_derivative(self, y):
        return _sigmoid(np.asarray(y))

    def _log_derivative(self, y):
        return -np.logaddexp(0.0, -np.asarray(y))

    def _log_derivative_grad(self, y):
        return _sigmoid(-np.asarray(y))


def _sigmoid(y):
    with np.errstate(over="ignore"):
        return np.where(y >= 0, 1.0 / (1.0 + np.exp(-np.abs(y))),
                        np.exp(-np.abs(y)) / (1.0 + np.exp(-np.abs(y))))


class Affine(Bijector):
    """``x = shift + scale * y`` with elementwise nonzero ``scale``."""

    name = "affine"

    def __init__(self, shift=0.0, scale=1.0):
        self.shift = np.asarray(shift, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        if np.any(self.scale == 0) or not np.all(np.isfinite(self.scale)):
            raise ValueError("affine scale must be finite and nonzero")

    def forward(self, y):
        return self.shift + self.scale * np.asarray(y)

    def inverse(self, x):
        return (np.asarray(x) - self.shift) / self.scale

    def forward_derivative(self, y):
        return np.broadcast_to(self.scale, np.shape(y)).astype(np.asarray(y).dtype)

    def _log_derivative(self, y):
        return np.broadcast_to(np.log(np.abs(self.scale)), np.shape(y)).astype(np.asarray(y).dtype)

    def _log_derivative_grad(self, y):
        return np.zeros_like(y)

    def __repr__(self):
        return f"Affine(shift={self.shift!r}, scale={self.scale!r})"


BIJECTORS = {"identity": Identity, "exp": Exp, "softplus": Softplus}


# ---------------------------------------------------------------------------
# Transformed kernel


class TransformedResults(NamedTuple):
    transformed_state: object
    inner_results: object


class TransformedTransitionKernel(TransitionKernel):
    """Runs an inner kernel on unconstrained ``y`` with ``x = forward(y)``.

    The inner kernel samples the pullback density
    ``f(y) = tlp(forward(y)) + forward_log_det_jacobian(y)`` and the chain
    state reported to the caller is ``forward(y)``.

    Args:
      target_log_prob_fn: batched target on the constrained space.
      bijector: one ``Bijector`` or a list with one per state part.
      make_inner_kernel_fn: builds the inner kernel from the pullback
        target. Called as ``make_inner_kernel_fn(tlp, value_and_grad)`` when
        an analytic gradient is supplied, ``make_inner_kernel_fn(tlp)``
        otherwise.
      value_and_grad_fn: optional ``(*parts) -> (tlp, grads)`` of the
        constrained target; the pullback gradient then follows from the
        chain rule.
    """

    def __init__(self, target_log_prob_fn, bijector, make_inner_kernel_fn, value_and_grad_fn=None):
        self._target_log_prob_fn = target_log_prob_fn
        self._bijector = bijector
        self._value_and_grad_fn = value_and_grad_fn
        if value_and_grad_fn is None:
            self._inner_kernel = make_inner_kernel_fn(self._pullback_target_log_prob)
        else:
            self._inner_kernel = make_inner_kernel_fn(
                self._pullback_target_log_prob, self._pullback_value_and_grad)

    @property
    def inner_kernel(self) -> TransitionKernel:
        return self._inner_kernel

    @property
    def bijector(self):
        return self._bijector

    @property
    def is_calibrated(self) -> bool:
        return self._inner_kernel.is_calibrated

    def _bijectors(self, n):
        if isinstance(self._bijector, (list, tuple)):
            if len(self._bijector) != n:
                raise ValueError(f"got {len(self._bijector)} bijectors for {n} state parts")
            return list(self._bijector)
        return [self._bijector] * n

    def _forward(self, y_parts):
        with np.errstate(all="ignore"):
            return [b.forward(y) for b, y in zip(self._bijectors(len(y_parts)), y_parts)]

    def _inverse(self, x_parts):
        return [b.inverse(x) for b, x in zip(self._bijectors(len(x_parts)), x_parts)]

    def _fldj(self, y_parts):
        return sum(b.forward_log_det_jacobian(y) for b, y in zip(self._bijectors(len(y_parts)), y_parts))

    def _pullback_target_log_prob(self, *y_parts):
        y_parts = [np.asarray(y) for y in y_parts]
        x_parts = self._forward(y_parts)
        tlp = call_target(self._target_log_prob_fn, x_parts)
        with np.errstate(invalid="ignore"):
            out = tlp + self._fldj(y_parts)
        return np.where(np.isnan(out), -np.inf, out)

    def _pullback_value_and_grad(self, *y_parts):
        y_parts = [np.asarray(y) for y in y_parts]
        bijectors = self._bijectors(len(y_parts))
        x_parts = self._forward(y_parts)
        tlp, grads = self._value_and_grad_fn(*x_parts)
        grads = grads if isinstance(grads, (list, tuple)) else [grads]
        tlp = np.asarray(tlp)
        with np.errstate(all="ignore"):
            value = tlp + self._fldj(y_parts)
            pulled = [np.asarray(g) * b.forward_derivative(y) + b.forward_log_det_jacobian_grad(y)
                      for b, g, y in zip(bijectors, grads, y_parts)]
        return np.where(np.isnan(value), -np.inf, value), pulled

    def bootstrap_results(self, init_state):
        parts, was_list = as_parts(init_state)
        with np.errstate(all="ignore"):
            y_parts = self._inverse(parts)
        for j, y in enumerate(y_parts):
            if not np.all(np.isfinite(y)):
                raise ValueError(
                    f"initial state part {j} lies outside the range of {self._bijectors(len(parts))[j]!r}")
        y_state = restore_structure(y_parts, was_list)
        return TransformedResults(
            transformed_state=y_state,
            inner_results=self._inner_kernel.bootstrap_results(y_state),
        )

    def one_step(self, current_state, previous_kernel_results, key):
        _, was_list = as_parts(current_state)
        new_y, inner = self._inner_kernel.one_step(
            previous_kernel_results.transformed_state, previous_kernel_results.inner_results, key)
        y_parts, _ = as_parts(new_y)
        x_parts = self._forward(y_parts)
        return (restore_structure(x_parts, was_list),
                TransformedResults(transformed_state=new_y, inner_results=inner))


# ---------------------------------------------------------------------------
# Step-size adaptation


class SimpleStepSizeAdaptationResults(NamedTuple):
    inner_results: object
    step: np.ndarray
    new_step_size: list


def _default_step_size_path(results) -> str:
    """Shortest results path naming a ``step_size`` entry."""
    candidates = set()
    for path, _ in nest_flatten_with_paths(results):
        names = path.split("/")
        if "step_size" in names:
            candidates.add("/".join(names[: names.index("step_size") + 1]))
    if not candidates:
        raise ContractError("inner kernel results carry no step_size entry")
    return min(candidates, key=lambda p: (p.count("/"), p))


class SimpleStepSizeAdaptation(TransitionKernel):
    """Multiplicative step-size nudging toward a target acceptance rate.

    For the first ``num_adaptation_steps`` steps, after every inner step the
    mean over chains of ``exp(min(0, log_accept_ratio))`` is compared with
    ``target_accept_prob``; the step size is multiplied by
    ``exp(adaptation_rate)`` when above it and by ``exp(-adaptation_rate)``
    otherwise. Afterwards the step size is left untouched.

    Args:
      inner_kernel: kernel whose results carry a step size leaf.
      num_adaptation_steps: number of steps that adapt; usually the burn-in
        length.
      target_accept_prob: in (0, 1).
      adaptation_rate: log-scale nudge per step, > 0.
      log_accept_ratio_path: results path of the acceptance statistic.
      step_size_path: results path of the step size; found automatically
        when omitted.
    """

    def __init__(self, inner_kernel: TransitionKernel, num_adaptation_steps: int,
                 target_accept_prob: float = 0.75, adaptation_rate: float = 0.01,
                 log_accept_ratio_path: str = "log_accept_ratio", step_size_path: str | None = None):
        if not 0.0 < target_accept_prob < 1.0:
            raise ValueError(f"target_accept_prob must lie in (0, 1), got {target_accept_prob}")
        if not adaptation_rate > 0:
            raise ValueError(f"adaptation_rate must be positive, got {adaptation_rate}")
        if int(num_adaptation_steps) < 0:
            raise ValueError("num_adaptation_steps must be non-negative")
        self._inner_kernel = inner_kernel
        self.num_adaptation_steps = int(num_adaptation_steps)
        self.target_accept_prob = float(target_accept_prob)
        self.adaptation_rate = float(adaptation_rate)
        self.log_accept_ratio_path = log_accept_ratio_path
        self._step_size_path = step_size_path

    @property
    def inner_kernel(self) -> TransitionKernel:
        return self._inner_kernel

    @property
    def is_calibrated(self) -> bool:
        return self._inner_kernel.is_calibrated

    def _path(self, inner_results) -> str:
        return self._step_size_path or _default_step_size_path(inner_results)

    def bootstrap_results(self, init_state):
        inner = self._inner_kernel.bootstrap_results(init_state)
        get_path(inner, self.log_accept_ratio_path)
        step_size = get_path(inner, self._path(inner))
        return SimpleStepSizeAdaptationResults(
            inner_results=inner,
            step=np.asarray(0, dtype=np.int64),
            new_step_size=_as_size_list(step_size),
        )

    def one_step(self, current_state, previous_kernel_results, key):
        step = np.asarray(previous_kernel_results.step)
        new_state, inner = self._inner_kernel.one_step(
            current_state, previous_kernel_results.inner_results, key)
        path = self._path(inner)
        step_size = get_path(inner, path)
        if int(step) < self.num_adaptation_steps:
            lar = np.asarray(get_path(inner, self.log_accept_ratio_path))
            with np.errstate(over="ignore"):
                mean_accept = float(np.mean(np.exp(np.minimum(0.0, np.nan_to_num(lar, nan=-np.inf)))))
            factor = np.exp(self.adaptation_rate if mean_accept > self.target_accept_prob
                            else -self.adaptation_rate)
            step_size = _scale_sizes(step_size, factor)
            inner = set_path(inner, path, step_size)
        return new_state, SimpleStepSizeAdaptationResults(
            inner_results=inner, step=step + 1, new_step_size=_as_size_list(step_size))


def _as_size_list(step_size) -> list:
    if isinstance(step_size, (list, tuple)):
        return [np.asarray(s) for s in step_size]
    return [np.asarray(step_size)]


def _scale_sizes(step_size, factor):
    if isinstance(step_size, (list, tuple)):
        return type(step_size)(np.asarray(s) * np.asarray(factor, dtype=np.asarray(s).dtype)
                               for s in step_size)
    s = np.asarray(step_size)
    return s * np.asarray(factor, dtype=s.dtype)
