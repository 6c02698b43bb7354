"""Command-line entry point: ``batchmc run --target ... --kernel ...``."""

from __future__ import annotations

import sys

import click

from batchmc import harness
from batchmc.errors import ContractError

EXIT_OK = 0
EXIT_USAGE = 2  # click's own code for malformed flags
EXIT_UNKNOWN_NAME = 3
EXIT_BAD_HYPERPARAMETER = 4
EXIT_VALIDATION = 5
EXIT_OUTPUT = 6
EXIT_CONTRACT = 7


def _parse_betas(_, __, value):
    if value is None:
        return None
    try:
        return tuple(float(v) for v in value.split(","))
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}") from None


@click.group()
def main():
    """Batched MCMC sampling over built-in analytic targets."""


@main.command("run")
@click.option("--target", default="std_normal", show_default=True,
              help="One of: " + ", ".join(harness.TARGETS))
@click.option("--dim", default=1, type=int, show_default=True, help="Event size for vector targets.")
@click.option("--heads", default=7, type=int, show_default=True, help="coin_flip_posterior heads.")
@click.option("--flips", default=10, type=int, show_default=True, help="coin_flip_posterior flips.")
@click.option("--kernel", default="hmc", show_default=True, help="hmc, nuts, rwm or remc.")
@click.option("--step-size", default=0.5, type=float, show_default=True,
              help="Leapfrog step size, or proposal scale for rwm/remc.")
@click.option("--num-leapfrog", default=3, type=int, show_default=True)
@click.option("--num-chains", default=4, type=int, show_default=True)
@click.option("--num-burnin", default=500, type=int, show_default=True)
@click.option("--num-results", default=1000, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--adapt-step-size", default=0, type=int, show_default=True, metavar="N",
              help="Adapt the step size during the first N steps.")
@click.option("--transform", default="identity", show_default=True, help="identity, exp or softplus.")
@click.option("--output", default=None, help="Samples file; the report goes next to it.")
@click.option("--format", "fmt", default="csv", show_default=True, help="csv or jsonl.")
@click.option("--dtype", default="f64", show_default=True, help="f32 or f64.")
@click.option("--max-tree-depth", default=10, type=int, show_default=True)
@click.option("--inverse-temperatures", default=None, callback=_parse_betas,
              help="Comma-separated, decreasing, starting at 1 (remc).")
def run_command(target, dim, heads, flips, kernel, step_size, num_leapfrog, num_chains, num_burnin,
                num_results, seed, adapt_step_size, transform, output, fmt, dtype, max_tree_depth,
                inverse_temperatures):
    """Sample one target with one kernel stack and print a summary."""
    config = harness.RunConfig(
        target=target, dim=dim, heads=heads, flips=flips, kernel=kernel, step_size=step_size,
        num_leapfrog=num_leapfrog, num_chains=num_chains, num_burnin=num_burnin,
        num_results=num_results, seed=seed, adapt_step_size=adapt_step_size, transform=transform,
        output=output, format=fmt, dtype=dtype, max_tree_depth=max_tree_depth)
    if inverse_temperatures is not None:
        config.inverse_temperatures = inverse_temperatures
    sys.exit(execute(config))


def execute(config: harness.RunConfig, echo=click.echo) -> int:
    """Runs ``config`` and maps failures to exit codes, printing the reason."""
    try:
        result = harness.run(config, echo=echo)
    except harness.UnknownNameError as err:
        return _fail(EXIT_UNKNOWN_NAME, err)
    except harness.ConfigError as err:
        return _fail(EXIT_BAD_HYPERPARAMETER, err)
    except harness.ValidationFailure as err:
        return _fail(EXIT_VALIDATION, err)
    except harness.OutputError as err:
        return _fail(EXIT_OUTPUT, err)
    except ContractError as err:
        return _fail(EXIT_CONTRACT, err)
    if result.samples_path:
        echo(f"samples: {result.samples_path}\nreport: {result.report_path}")
    return EXIT_OK


def _fail(code, err) -> int:
    click.echo(f"error: {err}", err=True)
    return code


if __name__ == "__main__":  # pragma: no cover
    main()
