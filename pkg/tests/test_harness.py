import json

import numpy as np
import pytest
from click.testing import CliRunner
from scipy import stats

from batchmc import cli, harness
from batchmc.harness import (
    TARGETS,
    RunConfig,
    coin_flip_posterior,
    mvn_diag,
    read_samples_csv,
    validate_batch_semantics,
    write_samples,
)


def _target_instances():
    for name, factory in TARGETS.items():
        if name == "mvn_diag":
            yield mvn_diag([1.0, -2.0, 0.5], [0.5, 2.0, 1.0])
        elif name == "coin_flip_posterior":
            yield factory()
        else:
            yield factory(dim=3)


@pytest.mark.parametrize("target", list(_target_instances()), ids=lambda t: t.name)
def test_analytic_gradients_match_finite_differences(target):
    lo, hi = target.validation_range
    x = np.random.default_rng(0).uniform(lo, hi, size=(6,) + target.event_shape)
    tlp, (g,) = target.value_and_grad_fn(x)
    np.testing.assert_array_equal(tlp, target.target_log_prob_fn(x))
    h = 1e-5
    for idx in np.ndindex(*target.event_shape):
        e = np.zeros_like(x)
        e[(slice(None),) + idx] = h
        fd = (target.target_log_prob_fn(x + e) - target.target_log_prob_fn(x - e)) / (2 * h)
        assert np.max(np.abs(g[(slice(None),) + idx] - fd)) < 1e-6


@pytest.mark.parametrize("target", list(_target_instances()), ids=lambda t: t.name)
def test_builtin_targets_pass_validation_and_keep_dtype(target):
    assert validate_batch_semantics(target.target_log_prob_fn, target.event_shape,
                                    value_range=target.validation_range).passed
    x = np.full((4,) + target.event_shape, 0.5, np.float32)
    assert target.target_log_prob_fn(x).dtype == np.float32


def test_validator_verdicts():
    def hostile(x):
        return -0.5 * np.sum(x ** 2)

    def friendly(x):
        return -0.5 * np.sum(x ** 2, axis=-1)

    def mixing(x):
        return -0.5 * np.sum((x - x.mean(axis=0)) ** 2, axis=-1)

    built = mvn_diag([0.0, 1.0], [1.0, 2.0])
    assert not validate_batch_semantics(hostile, (2,)).passed
    assert validate_batch_semantics(friendly, (2,)).passed
    assert validate_batch_semantics(built.target_log_prob_fn, (2,)).passed
    report = validate_batch_semantics(mixing, (2,))
    assert not report.passed
    failed = [c.name for c in report.checks if not c.passed]
    assert failed == ["separable C=2", "separable C=5"]
    assert "FAIL" in report.summary()


def test_validator_reports_exceptions_without_raising():
    def broken(x):
        raise RuntimeError("boom")

    report = validate_batch_semantics(broken, (1,))
    assert not report.passed and "boom" in report.checks[0].message


def test_coin_flip_density_on_grid():
    target = coin_flip_posterior(7, 10)
    p = np.linspace(0.01, 0.99, 99)
    tlp = target.target_log_prob_fn(p[:, None])
    want = stats.beta(8, 4).logpdf(p)
    diff = tlp - want
    np.testing.assert_allclose(diff, diff[0], atol=1e-12)  # equal up to the normalizer
    outside = target.target_log_prob_fn(np.array([[0.0], [1.0], [-0.1], [1.2]]))
    assert np.all(outside == -np.inf)
    np.testing.assert_allclose(target.mean, [2 / 3])
    np.testing.assert_allclose(target.variance, [stats.beta(8, 4).var()])
    with pytest.raises(harness.ConfigError):
        coin_flip_posterior(11, 10)


def test_bimodal_moments_match_numeric_integration():
    target = TARGETS["bimodal_mixture"](separation=6.0, dim=1)
    x = np.linspace(-15, 15, 30001)
    dens = np.exp(target.target_log_prob_fn(x[:, None]))
    dx = x[1] - x[0]
    assert abs(dens.sum() * dx - 1) < 1e-10
    assert abs((x ** 2 * dens).sum() * dx - target.variance[0]) < 1e-8


def test_csv_layout_and_round_trip(tmp_path):
    samples = np.random.default_rng(0).normal(size=(2, 2, 3))
    path = tmp_path / "s.csv"
    write_samples(samples, path, "csv", ["x"], trace={"accepted": np.ones((2, 2), bool)})
    lines = path.read_text().splitlines()
    assert lines[0] == "draw,chain,x[0],x[1],x[2],trace:accepted"
    assert len(lines) == 1 + 4
    assert lines[1].startswith("0,0,") and lines[2].startswith("0,1,") and lines[3].startswith("1,0,")
    np.testing.assert_array_equal(read_samples_csv(path), samples)


def test_jsonl_layout(tmp_path):
    samples = np.arange(12.0).reshape(3, 2, 2)
    path = tmp_path / "s.jsonl"
    write_samples(samples, path, "jsonl", ["theta"])
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(records) == 3
    assert records[1] == {"draw": 1, "theta": [[4.0, 5.0], [6.0, 7.0]]}


def test_unwritable_output_is_output_error(tmp_path):
    with pytest.raises(harness.OutputError):
        write_samples(np.zeros((1, 1)), tmp_path / "missing" / "s.csv")


def _config(tmp_path, **kwargs):
    base = dict(num_chains=4, num_burnin=20, num_results=30, output=str(tmp_path / "out.csv"))
    return RunConfig(**(base | kwargs))


def test_run_writes_samples_and_report(tmp_path):
    result = harness.run(_config(tmp_path, target="coin_flip_posterior", kernel="nuts"))
    assert result.samples.shape == (30, 4, 1)
    assert result.report_path == str(tmp_path / "out.report.json")
    report = json.loads((tmp_path / "out.report.json").read_text())
    assert report["schema_version"] == "1.0"
    assert report["diagnostics"]["variables"] == ["p[0]"]
    assert report["batch_semantics"]["passed"]
    assert set(report["timings"]) >= {"bootstrap_s", "burnin_s", "sampling_s", "per_step_s"}
    assert read_samples_csv(result.samples_path, "p").shape == (30, 4, 1)


def test_same_seed_gives_identical_files(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = harness.run(_config(tmp_path / "a", seed=3))
    b = harness.run(_config(tmp_path / "b", seed=3))
    assert (tmp_path / "a" / "out.csv").read_bytes() == (tmp_path / "b" / "out.csv").read_bytes()
    strip = lambda r: {k: v for k, v in r.items() if k not in ("timings", "config", "samples_file")}  # noqa: E731
    assert strip(a.report) == strip(b.report)


def test_zero_results_run(tmp_path):
    result = harness.run(_config(tmp_path, num_results=0))
    assert result.samples.shape == (0, 4, 1)
    assert (tmp_path / "out.csv").read_text() == "draw,chain,x[0]\n"


@pytest.mark.parametrize("kwargs,code", [
    (dict(target="nope"), cli.EXIT_UNKNOWN_NAME),
    (dict(kernel="gibbs"), cli.EXIT_UNKNOWN_NAME),
    (dict(transform="tanh"), cli.EXIT_UNKNOWN_NAME),
    (dict(step_size=-1.0), cli.EXIT_BAD_HYPERPARAMETER),
    (dict(num_chains=0), cli.EXIT_BAD_HYPERPARAMETER),
    (dict(kernel="remc", inverse_temperatures=(0.5, 0.2)), cli.EXIT_BAD_HYPERPARAMETER),
    (dict(kernel="rwm", adapt_step_size=10), cli.EXIT_BAD_HYPERPARAMETER),
    (dict(output="/nonexistent-dir/x.csv"), cli.EXIT_OUTPUT),
    (dict(), cli.EXIT_OK),
])
def test_exit_codes(tmp_path, kwargs, code):
    cfg = _config(tmp_path, **kwargs)
    assert cli.execute(cfg, echo=lambda s: None) == code


def test_batch_hostile_target_exit_code(tmp_path, monkeypatch):
    good = harness.std_normal(1)
    hostile = harness.TargetSpec("hostile", (1,), lambda x: -0.5 * np.sum(x ** 2), good.value_and_grad_fn)
    monkeypatch.setitem(harness.TARGETS, "std_normal", lambda dim: hostile)
    assert cli.execute(_config(tmp_path), echo=lambda s: None) == cli.EXIT_VALIDATION


def test_cli_entry_point(tmp_path):
    out = tmp_path / "cli.csv"
    runner = CliRunner()
    res = runner.invoke(cli.main, ["run", "--kernel", "remc", "--inverse-temperatures", "1,0.5",
                                   "--num-burnin", "10", "--num-results", "20", "--output", str(out)])
    assert res.exit_code == 0, res.output
    assert "swap_rate" in res.output and out.exists()
    assert runner.invoke(cli.main, ["run", "--num-chains", "many"]).exit_code == cli.EXIT_USAGE
    assert runner.invoke(cli.main, ["run", "--inverse-temperatures", "1,a"]).exit_code == cli.EXIT_USAGE
    assert runner.invoke(cli.main, ["run", "--target", "nope"]).exit_code == cli.EXIT_UNKNOWN_NAME


@pytest.mark.parametrize("kwargs", [dict(kernel="hmc", transform="exp", target="coin_flip_posterior"),
                                    dict(kernel="nuts", transform="softplus", adapt_step_size=20,
                                         target="coin_flip_posterior"),
                                    dict(kernel="rwm", format="jsonl", output=None),
                                    dict(kernel="nuts", dtype="f32", dim=3, target="correlated_gaussian")])
def test_kernel_stacks_run(tmp_path, kwargs):
    result = harness.run(_config(tmp_path, **kwargs))
    assert np.all(np.isfinite(result.samples))
    if kwargs.get("dtype") == "f32":
        assert result.samples.dtype == np.float32
    if kwargs.get("target") == "coin_flip_posterior":
        assert np.all((result.samples > 0) & (result.samples < 1))


def test_scaling_report_shape():
    points = harness.scaling_report(chain_counts=(1, 8), num_steps=3, repeats=1)
    assert [p.num_chains for p in points] == [1, 8]
    assert all(p.seconds_per_step > 0 for p in points)
