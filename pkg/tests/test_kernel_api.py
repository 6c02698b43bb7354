"""Structural contract checks shared by every kernel and wrapper nesting."""

from typing import NamedTuple

import numpy as np
import pytest

from batchmc import numerics
from batchmc.composition import Exp, Identity, SimpleStepSizeAdaptation, TransformedTransitionKernel
from batchmc.errors import BatchSemanticsError, ContractError
from batchmc.hmc import HamiltonianMonteCarlo
from batchmc.kernel import (
    assert_same_structure,
    call_target,
    chain_keys,
    finite_difference_gradient,
    get_path,
    has_path,
    nest_flatten_with_paths,
    nest_map,
    select_per_chain,
    set_path,
    value_and_gradient,
)
from batchmc.metropolis import RandomWalkMetropolis
from batchmc.nuts import NoUTurnSampler
from batchmc.replica_exchange import ReplicaExchangeMC

C = 5


def normal_tlp(x):
    return -0.5 * numerics.reduce_sum_event(x * x)


def normal_vg(x):
    return normal_tlp(x), [-x]


def two_part_tlp(a, b):
    return -0.5 * a * a - 0.5 * numerics.reduce_sum_event((b - 1.0) ** 2)


def positive_tlp(x):
    # Gamma(3, 1) density per element, log scale.
    with np.errstate(divide="ignore", invalid="ignore"):
        return numerics.reduce_sum_event(np.where(x > 0, 2 * np.log(x) - x, -np.inf))


def two_part_positive_tlp(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(a > 0, 2 * np.log(a) - a, -np.inf) - 0.5 * numerics.reduce_sum_event(b * b)


def _single(tlp_factory, init):
    return lambda: (tlp_factory(), init)


CASES = {
    "mh_rwm": (lambda: RandomWalkMetropolis(normal_tlp, scale=0.7), "single"),
    "mh_hmc": (lambda: HamiltonianMonteCarlo(normal_tlp, 0.3, 3, value_and_grad_fn=normal_vg), "single"),
    "mh_hmc_fd": (lambda: HamiltonianMonteCarlo(normal_tlp, 0.3, 2), "single"),
    "adapt_hmc": (lambda: SimpleStepSizeAdaptation(HamiltonianMonteCarlo(normal_tlp, 0.3, 3), 10), "single"),
    "transform_hmc": (lambda: TransformedTransitionKernel(
        positive_tlp, Exp(), lambda f: HamiltonianMonteCarlo(f, 0.3, 3)), "positive"),
    "remc_rwm": (lambda: ReplicaExchangeMC(
        normal_tlp, [1.0, 0.5, 0.2], lambda f: RandomWalkMetropolis(f, scale=0.7)), "single"),
    "remc_hmc": (lambda: ReplicaExchangeMC(
        normal_tlp, [1.0, 0.4], lambda f, vg: HamiltonianMonteCarlo(f, 0.3, 2, value_and_grad_fn=vg),
        value_and_grad_fn=normal_vg), "single"),
    "nuts": (lambda: NoUTurnSampler(normal_tlp, 0.4, max_tree_depth=4, value_and_grad_fn=normal_vg),
             "single"),
    "adapt_nuts": (lambda: SimpleStepSizeAdaptation(
        NoUTurnSampler(normal_tlp, 0.4, max_tree_depth=4), 10), "single"),
    "transform_nuts": (lambda: TransformedTransitionKernel(
        positive_tlp, Exp(), lambda f: NoUTurnSampler(f, 0.3, max_tree_depth=3)), "positive"),
    # Multi-part states.
    "mh_rwm_parts": (lambda: RandomWalkMetropolis(two_part_tlp, scale=[0.5, 0.7]), "parts"),
    "mh_hmc_parts": (lambda: HamiltonianMonteCarlo(two_part_tlp, [0.2, 0.3], 3), "parts"),
    "nuts_parts": (lambda: NoUTurnSampler(two_part_tlp, 0.3, max_tree_depth=3), "parts"),
    "transform_hmc_parts": (lambda: TransformedTransitionKernel(
        two_part_positive_tlp, [Exp(), Identity()], lambda f: HamiltonianMonteCarlo(f, 0.2, 2)),
        "positive_parts"),
    "remc_rwm_parts": (lambda: ReplicaExchangeMC(
        two_part_tlp, [1.0, 0.3], lambda f: RandomWalkMetropolis(f, scale=0.6)), "parts"),
}


def make_state(kind, c, dtype=np.float64):
    rng = np.random.default_rng(42)
    if kind == "single":
        return rng.normal(size=(c, 2)).astype(dtype)
    if kind == "positive":
        return rng.uniform(0.5, 3.0, size=(c, 2)).astype(dtype)
    if kind == "parts":
        return [rng.normal(size=(c,)).astype(dtype), rng.normal(size=(c, 2)).astype(dtype)]
    return [rng.uniform(0.5, 3.0, size=(c,)).astype(dtype), rng.normal(size=(c, 2)).astype(dtype)]


def _parts(state):
    return state if isinstance(state, list) else [state]


def _copy(tree):
    return nest_map(lambda leaf: np.array(leaf, copy=True), tree)


def _assert_tree_equal(a, b):
    assert_same_structure(a, b)
    for (path, x), (_, y) in zip(nest_flatten_with_paths(a), nest_flatten_with_paths(b)):
        np.testing.assert_array_equal(np.asarray(x), np.asarray(y), err_msg=path)


@pytest.fixture(params=sorted(CASES))
def case(request):
    factory, kind = CASES[request.param]
    return request.param, factory(), kind


def test_structure_and_dtype_match_bootstrap(case):
    _, kernel, kind = case
    state = make_state(kind, C)
    results = kernel.bootstrap_results(state)
    key = numerics.RngKey.from_seed(0)
    for i in range(3):
        state, new_results = kernel.one_step(state, results, numerics.fold_in(key, i))
        assert_same_structure(results, new_results)
        results = new_results


def test_one_step_is_pure(case):
    _, kernel, kind = case
    state = make_state(kind, C)
    results = kernel.bootstrap_results(state)
    state_copy, results_copy = _copy(state), _copy(results)
    key = numerics.RngKey.from_seed(1)
    first = kernel.one_step(state, results, key)
    second = kernel.one_step(state, results, key)
    _assert_tree_equal(first, second)
    _assert_tree_equal(state, state_copy)
    _assert_tree_equal(results, results_copy)


def test_shape_and_dtype_preserved(case):
    _, kernel, kind = case
    state = make_state(kind, C)
    new_state, _ = kernel.one_step(state, kernel.bootstrap_results(state), numerics.RngKey.from_seed(2))
    assert type(new_state) is type(state)
    for old, new in zip(_parts(state), _parts(new_state)):
        assert new.shape == old.shape and new.dtype == old.dtype


def test_chain_count_invariance(case):
    """Chain c of a C-chain step equals a 1-chain step with chain c's key."""
    name, kernel, kind = case
    state = make_state(kind, C)
    keys = chain_keys(numerics.RngKey.from_seed(3), C)
    joint_state, joint_results = kernel.one_step(state, kernel.bootstrap_results(state), keys)
    for c in range(C):
        single = [p[c:c + 1] for p in _parts(state)]
        single = single if isinstance(state, list) else single[0]
        s_state, s_results = kernel.one_step(single, kernel.bootstrap_results(single), keys[c:c + 1])
        for joint, alone in zip(_parts(joint_state), _parts(s_state)):
            np.testing.assert_array_equal(joint[c:c + 1], alone)
        if name.startswith("adapt"):
            continue  # the adapted step size is a cross-chain statistic
        for (path, j), (_, s) in zip(nest_flatten_with_paths(joint_results),
                                     nest_flatten_with_paths(s_results)):
            j, s = np.asarray(j), np.asarray(s)
            if j.ndim and j.shape[0] == C:
                np.testing.assert_array_equal(j[c:c + 1], s, err_msg=path)


def test_dtype_float32_runs(case):
    name, kernel, kind = case
    state = make_state(kind, C, np.float32)
    results = kernel.bootstrap_results(state)
    new_state, new_results = kernel.one_step(state, results, numerics.RngKey.from_seed(4))
    assert all(p.dtype == np.float32 for p in _parts(new_state))
    assert_same_structure(results, new_results)


def test_bad_key_batch_shape_rejected():
    kernel = RandomWalkMetropolis(normal_tlp)
    state = make_state("single", C)
    keys = numerics.split_axis(numerics.RngKey.from_seed(0), C + 1)
    with pytest.raises(ContractError):
        kernel.one_step(state, kernel.bootstrap_results(state), keys)


# Target helpers -----------------------------------------------------------------


def test_call_target_rejects_batch_hostile_target():
    x = np.zeros((3, 2))
    with pytest.raises(BatchSemanticsError):
        call_target(lambda v: -0.5 * np.sum(v ** 2), [x])
    assert call_target(normal_tlp, [x]).shape == (3,)


def test_finite_difference_gradient_matches_analytic():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4,))
    b = rng.normal(size=(4, 3))

    def tlp(u, v):
        return np.sin(u) * 2 + numerics.reduce_sum_event(v ** 3 - v)

    grads = finite_difference_gradient(tlp, [a, b])
    np.testing.assert_allclose(grads[0], 2 * np.cos(a), rtol=1e-8, atol=1e-9)
    np.testing.assert_allclose(grads[1], 3 * b ** 2 - 1, rtol=1e-8, atol=1e-9)


def test_value_and_gradient_checks_shapes():
    x = np.zeros((3, 2))
    with pytest.raises(BatchSemanticsError):
        value_and_gradient(normal_tlp, [x], lambda v: (np.zeros(2), [v]))
    with pytest.raises(ContractError):
        value_and_gradient(normal_tlp, [x], lambda v: (np.zeros(3), [v, v]))


# Result trees -----------------------------------------------------------------


class Inner(NamedTuple):
    step_size: list
    target_log_prob: np.ndarray


class Outer(NamedTuple):
    accepted_results: Inner
    is_accepted: np.ndarray
    extra: dict


def _tree():
    return Outer(Inner([np.array(0.1), np.array(0.2)], np.zeros(3)), np.ones(3, bool),
                 {"note": np.arange(2)})


def test_paths_and_access():
    tree = _tree()
    paths = [p for p, _ in nest_flatten_with_paths(tree)]
    assert paths == ["accepted_results/step_size/0", "accepted_results/step_size/1",
                     "accepted_results/target_log_prob", "is_accepted", "extra/note"]
    assert get_path(tree, "accepted_results/step_size")[1] == 0.2
    assert has_path(tree, "extra/note") and not has_path(tree, "missing")
    updated = set_path(tree, "accepted_results/step_size/0", np.array(0.5))
    assert updated.accepted_results.step_size[0] == 0.5
    assert tree.accepted_results.step_size[0] == 0.1
    with pytest.raises(ContractError, match="missing"):
        get_path(tree, "accepted_results/missing")
    with pytest.raises(ContractError):
        set_path(tree, "nope/x", 1)


def test_assert_same_structure_reports_path():
    tree = _tree()
    assert_same_structure(tree, _tree())
    changed = tree._replace(accepted_results=tree.accepted_results._replace(
        target_log_prob=np.zeros(3, np.float32)))
    with pytest.raises(ContractError, match="accepted_results/target_log_prob"):
        assert_same_structure(tree, changed)
    with pytest.raises(ContractError):
        assert_same_structure(tree, tree._replace(extra={"other": np.arange(2)}))


def test_select_per_chain():
    a = {"x": np.ones((3, 2)), "shared": np.array(1.0)}
    b = {"x": np.zeros((3, 2)), "shared": np.array(1.0)}
    out = select_per_chain(np.array([True, False, True]), a, b)
    np.testing.assert_array_equal(out["x"][:, 0], [1, 0, 1])
    assert out["shared"] == 1.0
