import itertools

import numpy as np
import pytest
from scipy import stats

from batchmc import numerics
from batchmc.driver import sample_chain
from batchmc.hmc import leapfrog
from batchmc.nuts import (
    STOP_REASONS,
    CheckpointBuffer,
    NoUTurnSampler,
    _uturn_check_slots,
    build_trajectory,
    has_u_turn,
)
from batchmc.nuts_reference import recursive_nuts_reference


class CandidateRecorder:
    """Collects (signed position, log weight) of every merged trajectory point."""

    def __init__(self, num_chains):
        self.pending = [[] for _ in range(num_chains)]
        self.candidates = [[(0, 0.0)] for _ in range(num_chains)]
        self.steps = []

    def on_step(self, d, i, active, position, weight, divergent, uturn):
        self.steps.append((d, i, active, position))
        for c in np.flatnonzero(active):
            self.pending[c].append((int(position[c]), float(weight[c])))

    def on_subtree(self, d, active, merge, full_uturn):
        for c in range(len(self.pending)):
            if merge[c]:
                self.candidates[c] += self.pending[c]
            self.pending[c] = []


def _random_gaussian(rng, dim):
    a = rng.uniform(0.2, 5.0, dim)

    def vg(parts):
        x = parts[0]
        return -0.5 * np.sum(a * x ** 2, -1), [-a * x]

    return vg


def _leapfrog_fn(vg, eps):
    def step(x, p, g, sign):
        r = leapfrog(x, p, [eps * sign[:, None]], 1, vg, grads=g)
        return r.state, r.momentum, r.target_log_prob, r.grads_target_log_prob
    return step


def test_iterative_builder_matches_recursive_oracle():
    mismatches, total = [], 0
    for dim in (1, 2):
        for seed in range(50):
            rng = np.random.default_rng(seed + 100 * dim)
            vg = _random_gaussian(rng, dim)
            # Large steps make divergences (threshold 10) part of the sweep.
            lf = _leapfrog_fn(vg, rng.choice([0.05, 0.3, 1.0, 2.5]))
            x0, p0 = [rng.normal(size=(1, dim))], [rng.normal(size=(1, dim))]
            tlp0, g0 = vg(x0)
            for depth in range(1, 5):
                for dirs in itertools.product([True, False], repeat=depth):
                    ref = recursive_nuts_reference(x0, p0, tlp0, g0, list(dirs), lf, max_energy_diff=10.0)
                    rec = CandidateRecorder(1)
                    traj = build_trajectory(
                        x0, p0, tlp0, g0, np.array([dirs]), lambda d: np.full((1, 1 << d), 0.5),
                        np.full((1, depth), 0.5), lf, depth, 10.0, rec)
                    got = (sorted(rec.candidates[0]), int(traj.depth_reached[0]),
                           STOP_REASONS[int(traj.stop_reason[0])])
                    want = (sorted(ref.candidates), ref.stop_depth, ref.stop_reason)
                    total += 1
                    if got != want:
                        mismatches.append((dim, seed, dirs))
    assert total == 3000
    assert mismatches == []


def test_oracle_sweep_covers_every_stop_reason():
    reasons = set()
    for seed in range(50):
        rng = np.random.default_rng(seed + 100)
        vg = _random_gaussian(rng, 1)
        lf = _leapfrog_fn(vg, rng.choice([0.05, 0.3, 1.0, 2.5]))
        x0, p0 = [rng.normal(size=(1, 1))], [rng.normal(size=(1, 1))]
        tlp0, g0 = vg(x0)
        for dirs in itertools.product([True, False], repeat=4):
            reasons.add(recursive_nuts_reference(x0, p0, tlp0, g0, list(dirs), lf, 10.0).stop_reason)
    assert reasons == {"uturn", "divergence", "max_depth"}


def test_uturn_check_slots():
    assert _uturn_check_slots(0, 3) == []
    assert _uturn_check_slots(1, 3) == [0]
    assert _uturn_check_slots(3, 3) == [1, 0]
    assert _uturn_check_slots(7, 3) == [2, 1, 0]
    assert _uturn_check_slots(5, 3) == [1]


def test_has_u_turn():
    x_minus, x_plus = [np.array([[0.0]])], [np.array([[1.0]])]
    assert not has_u_turn(x_plus, [np.array([[1.0]])], x_minus, [np.array([[1.0]])])[0]
    assert has_u_turn(x_plus, [np.array([[-1.0]])], x_minus, [np.array([[1.0]])])[0]
    assert has_u_turn(x_plus, [np.array([[1.0]])], x_minus, [np.array([[-0.1]])])[0]


def test_checkpoint_buffer_bounds():
    buf = CheckpointBuffer(2, [np.zeros((3, 2))])
    buf.write(1, np.array([True, False, True]), [np.ones((3, 2))], [np.ones((3, 2))])
    np.testing.assert_array_equal(buf.read(1)[0][0][:, 0], [1, 0, 1])
    with pytest.raises(IndexError):
        buf.write(2, np.ones(3, bool), [np.ones((3, 2))], [np.ones((3, 2))])


class BufferRecorder:
    def __init__(self):
        self.buffer = None
        self.max_depth_seen = 0

    def on_step(self, d, *args):
        self.max_depth_seen = max(self.max_depth_seen, d + 1)

    def on_subtree(self, *args):
        pass


def test_memory_is_linear_in_depth():
    max_depth = 10

    def vg(x):
        return -0.5 * numerics.reduce_sum_event(x * x), [-x]

    # Steps this small never U-turn within 2**10 leapfrogs.
    kernel = NoUTurnSampler(lambda x: vg(x)[0], 1e-4, max_tree_depth=max_depth, value_and_grad_fn=vg)
    x0 = np.ones((3, 2))
    rec = BufferRecorder()
    _, res = kernel.one_step(x0, kernel.bootstrap_results(x0), numerics.RngKey.from_seed(0), recorder=rec)
    np.testing.assert_array_equal(res.depth_reached, max_depth)
    np.testing.assert_array_equal(res.leapfrogs_taken, 2 ** max_depth - 1)
    assert rec.max_depth_seen == max_depth
    assert rec.buffer.state[0].shape == (max_depth - 1, 3, 2)
    assert len(rec.buffer.slots_used) <= rec.buffer.capacity
    # Checkpoints plus the two trajectory ends and the integrator point.
    assert rec.buffer.capacity + 3 <= max_depth + 2


def test_terminated_chains_are_frozen_and_batch_does_uniform_work():
    shapes = []

    def vg(x):
        shapes.append(x.shape)
        return -0.5 * numerics.reduce_sum_event(x * x), [-x]

    # Chain 0 has a tiny scale and U-turns late; chain 1 U-turns early.
    kernel = NoUTurnSampler(lambda x: vg(x)[0], [np.array([[0.02], [1.0]])], max_tree_depth=8,
                            value_and_grad_fn=vg)
    x0 = np.ones((2, 1))
    key = numerics.RngKey.from_seed(0)
    keys = numerics.split_axis(key, 2)
    shapes.clear()
    joint_x, res = kernel.one_step(x0, kernel.bootstrap_results(x0), keys)
    assert res.leapfrogs_taken[0] > res.leapfrogs_taken[1]
    # Every gradient evaluation is batched over both chains, so the batch
    # runs as many leapfrogs as its longest chain.
    assert set(shapes) == {(2, 1)}
    assert len(shapes) - 1 == res.leapfrogs_taken.max()

    # The early-stopping chain is unaffected by the extra masked work.
    alone = NoUTurnSampler(lambda x: vg(x)[0], [np.array([[1.0]])], max_tree_depth=8,
                           value_and_grad_fn=vg)
    x1 = x0[1:]
    alone_x, alone_res = alone.one_step(x1, alone.bootstrap_results(x1), keys[1:])
    np.testing.assert_array_equal(joint_x[1:], alone_x)
    assert alone_res.leapfrogs_taken[0] == res.leapfrogs_taken[1]


def test_max_tree_depth_validation():
    with pytest.raises(ValueError):
        NoUTurnSampler(lambda x: -x ** 2, 0.1, max_tree_depth=0)
    with pytest.raises(ValueError):
        NoUTurnSampler(lambda x: -x ** 2, 0.1, max_tree_depth=31)


def test_results_report_tree_statistics():
    kernel = NoUTurnSampler(lambda x: -0.5 * numerics.reduce_sum_event(x * x), 0.5, max_tree_depth=6)
    x0 = np.zeros((16, 2))
    _, res = kernel.one_step(x0, kernel.bootstrap_results(x0), numerics.RngKey.from_seed(2))
    assert np.all(res.leapfrogs_taken <= 2 ** res.depth_reached - 1)
    assert np.all((res.depth_reached >= 1) & (res.depth_reached <= 6))
    assert np.all(res.log_accept_ratio <= 0)
    assert not res.is_divergent.any()


def test_nuts_standard_normal_ks():
    def vg(x):
        return -0.5 * numerics.reduce_sum_event(x * x), [-x]

    kernel = NoUTurnSampler(lambda x: vg(x)[0], 0.5, value_and_grad_fn=vg)
    out = sample_chain(500, np.zeros((100, 1)), kernel, num_burnin_steps=100, seed=7)
    draws = out.all_states[::5, :, 0].ravel()  # 10^4 thinned draws
    assert draws.size == 10_000
    assert stats.kstest(draws, "norm").pvalue > 1e-3
