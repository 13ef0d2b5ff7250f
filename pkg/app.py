"""
Latent-space Bayesian active learning - experiment runner
Command-line entry point: generate, train-vae, run, evaluate
"""

import logging
import sys

import click
from dotenv import load_dotenv

from backend.errors import BalError, ConfigError
from backend.pipeline.experiment import METHODS, cmd_evaluate, cmd_generate, cmd_run, cmd_train_vae
from config.experiment_config import ENV_CONFIG, get_experiment_config, load_experiment_config, with_overrides

# Load environment
load_dotenv()

logger = logging.getLogger(__name__)


def _configure_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def common_options(f):
    """--config / --out / --seed / --verbose shared by every subcommand"""
    f = click.option("--verbose", "-v", is_flag=True, help="Debug logging and progress bars")(f)
    f = click.option("--seed", type=int, default=None, help="Override the master seed")(f)
    f = click.option("--out", "out", type=click.Path(file_okay=False), default=None, help="Run directory")(f)
    f = click.option(
        "--config",
        "config_path",
        type=click.Path(dir_okay=False),
        envvar=ENV_CONFIG,
        default=None,
        help="Experiment configuration (JSON)",
    )(f)
    return f


def _load(config_path, out, seed, verbose):
    _configure_logging(verbose)
    cfg = load_experiment_config(config_path) if config_path else get_experiment_config()
    return with_overrides(cfg, output_dir=out, seed=seed)


@click.group()
def cli():
    """Bayesian active learning of latent-space excitability posteriors."""


@cli.command()
@common_options
def generate(config_path, out, seed, verbose):
    """Training fields, lead field, test cases and noisy observations."""
    cfg = _load(config_path, out, seed, verbose)
    run = cmd_generate(cfg, verbose=verbose)
    click.echo(f"Generated data in {run.root}")


@cli.command("train-vae")
@common_options
def train_vae(config_path, out, seed, verbose):
    """Train the VAE on the generated fields."""
    cfg = _load(config_path, out, seed, verbose)
    run = cmd_train_vae(cfg, verbose=verbose)
    click.echo(f"VAE checkpoint in {run.vae_dir}")


@cli.command()
@common_options
@click.option("--method", type=click.Choice(METHODS), required=True, help="Inference method")
def run(config_path, out, seed, verbose, method):
    """Run one inference method on every case."""
    cfg = _load(config_path, out, seed, verbose)
    summaries = cmd_run(cfg, method, verbose=verbose)
    for s in summaries:
        click.echo(f"case {s['case']:02d} {method}: {s['n_simulations']} simulations")


@cli.command()
@common_options
def evaluate(config_path, out, seed, verbose):
    """Compare all methods against the direct-MCMC reference."""
    cfg = _load(config_path, out, seed, verbose)
    report = cmd_evaluate(cfg, verbose=verbose)
    click.echo(f"Report for {len(report['cases'])} cases written to {cfg.output_path / 'report.json'}")


def main(argv=None) -> int:
    """
    Run the CLI and translate failures into exit codes.

    0 success, 1 usage or configuration error, 2 missing prerequisite stage,
    3 numerical failure.
    """
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("Aborted", err=True)
        return 1
    except click.UsageError as e:
        e.show()
        return ConfigError.exit_code
    except BalError as e:
        logger.error(f"[Pipeline] {type(e).__name__}: {e}")
        click.echo(f"Error: {e}", err=True)
        return e.exit_code
    except (ValueError, ArithmeticError) as e:
        logger.exception(f"[Pipeline] Numerical failure: {e}")
        return BalError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
