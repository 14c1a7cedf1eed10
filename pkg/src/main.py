import logging
import sys
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import click

from src.config import ConfigError
from src.handlers.dataset_handler import REJECTED_FAMILIES, SPLITS
from src.handlers.experiment_handler import ExperimentReport
from src.handlers.objective_handler import PREFERENCE_METHODS
from src.handlers.rng_experiment_handler import POLICY_KINDS
from src.handlers.trainer_handler import TrainingAbortedError
from src.templates.experiment_runner import ExperimentRunner

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_TRAINING_ABORTED = 2
EXIT_UNEXPECTED = 3

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

OutDir = click.Path(path_type=Path, file_okay=False)
InFile = click.Path(path_type=Path, dir_okay=False)


def training_options(with_k: bool = True) -> Callable:
    """Flags shared by every command that preference-trains a policy."""
    options = [
        click.option("--method", type=click.Choice(PREFERENCE_METHODS), help="Preference objective"),
        click.option("--seed", type=click.IntRange(min=0), help="Seed for data, SFT and batching"),
        click.option("--beta", type=float, help="DPO temperature"),
        click.option("--tau", type=float, help="IPO regularization"),
        click.option("--nll-coeff", type=float, help="Weight of the chosen-response NLL anchor"),
        click.option("--lr", "learning_rate", type=float, help="Learning rate"),
        click.option("--steps", type=click.IntRange(min=1), help="Optimizer steps"),
        click.option("--batch-size", type=click.IntRange(min=1), help="Records per step"),
        click.option("--policy", "policy_kind", type=click.Choice(POLICY_KINDS), help="Policy family"),
        click.option("--out-dir", type=OutDir, help="Directory for CSV and JSON outputs"),
    ]
    if with_k:
        options.append(click.option("--k", type=click.IntRange(min=1), help="Truncate groups to k responses"))

    def decorator(func: Callable) -> Callable:
        for option in reversed(options):
            func = option(func)
        return func
    return decorator


def _echo_report(report: ExperimentReport) -> None:
    click.echo(report.table().to_string(index=False))
    for label, path in report.outputs.items():
        click.echo(f"{label}: {path}")


def _parse_ks(value: str) -> List[int]:
    try:
        ks = [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")
    if not ks or min(ks) < 1:
        raise click.BadParameter(f"group sizes must be positive, got {value!r}")
    return ks


@click.group()
@click.option("--experiments-config", type=InFile, default=None, help="Preset catalog YAML")
@click.option("--log-level", type=click.Choice(LOG_LEVELS, case_sensitive=False), default=None,
              help="Overrides MDPO_LOG_LEVEL for this run")
@click.pass_context
def cli(ctx: click.Context, experiments_config: Optional[Path], log_level: Optional[str]):
    """Multi-sample preference optimization on toy policies."""
    if log_level:
        logging.getLogger().setLevel(log_level.upper())
    try:
        ctx.obj = ExperimentRunner(experiments_config)
    except Exception as e:
        logger.critical(f"Failed to initialize experiment catalog: {e}")
        raise


@cli.command()
@click.option("--out", "out_path", type=InFile, required=True, help="JSONL file to write")
@click.option("--split", type=click.Choice(SPLITS), default="train")
@click.option("--seed", type=click.IntRange(min=0))
@click.option("--k", type=click.IntRange(min=1))
@click.option("--records", type=click.IntRange(min=1))
@click.option("--rejected-family", type=click.Choice(REJECTED_FAMILIES))
@click.pass_obj
def dataset(runner: ExperimentRunner, out_path: Path, split: str, **overrides):
    """Build an RNG preference dataset."""
    path = runner.build_dataset(out_path, split=split, **overrides)
    click.echo(f"dataset: {path}")


@cli.command()
@click.option("--dataset", "dataset_path", type=InFile, required=True)
@click.option("--test-dataset", "test_path", type=InFile, default=None)
@click.option("--baseline/--no-baseline", default=None, help="Also train the single-sample method")
@training_options()
@click.pass_obj
def train(runner: ExperimentRunner, dataset_path: Path, test_path: Optional[Path], **overrides):
    """SFT toward the bias token, then preference-train."""
    _echo_report(runner.train(dataset_path, test_path, **overrides))


@cli.command(name="eval")
@click.option("--policy-a", type=InFile, required=True)
@click.option("--policy-b", type=InFile, required=True)
@click.option("--dataset", "dataset_path", type=InFile, required=True)
@click.option("--out-dir", type=OutDir, default=None)
@click.pass_obj
def evaluate(runner: ExperimentRunner, policy_a: Path, policy_b: Path, dataset_path: Path,
             out_dir: Optional[Path]):
    """Compare two saved policies on a dataset's prompts."""
    _echo_report(runner.evaluate(policy_a, policy_b, dataset_path, out_dir))


@cli.command(name="sim-estimator")
@click.option("--config", "config_path", type=InFile, default=None, help="YAML params layered over the preset")
@click.option("--seed", type=click.IntRange(min=0))
@click.option("--trials", type=click.IntRange(min=1))
@click.option("--out-dir", type=OutDir)
@click.pass_obj
def sim_estimator(runner: ExperimentRunner, **overrides):
    """Bias and variance of the squared-difference estimators."""
    _echo_report(runner.simulate_estimator(**overrides))


@cli.command(name="sim-compare")
@click.option("--config", "config_path", type=InFile, default=None, help="YAML params layered over the preset")
@click.option("--seed", type=click.IntRange(min=0))
@click.option("--trials", type=click.IntRange(min=1))
@click.option("--out-dir", type=OutDir)
@click.pass_obj
def sim_compare(runner: ExperimentRunner, **overrides):
    """Group-sum label accuracy against the Hoeffding bound."""
    _echo_report(runner.simulate_compare(**overrides))


@cli.command(name="sim-noise")
@click.option("--noise-free/--noisy", default=None, help="Label by expected quality instead of noisy scores")
@training_options()
@click.pass_obj
def sim_noise(runner: ExperimentRunner, noise_free: Optional[bool], **overrides):
    """Single-sample against multi-sample training under noisy labels."""
    _echo_report(runner.simulate_noise(noise_free=noise_free, **overrides))


@cli.command()
@click.option("--dataset", "dataset_path", type=InFile, required=True)
@click.option("--rounds", type=click.IntRange(min=2))
@training_options()
@click.pass_obj
def iterate(runner: ExperimentRunner, dataset_path: Path, rounds: Optional[int], **overrides):
    """Several preference rounds, each against the previous policy."""
    _echo_report(runner.iterate(dataset_path, rounds, **overrides))


@cli.command(name="ablate-k")
@click.option("--ks", default=None, help="Comma-separated group sizes, e.g. 1,2,5")
@training_options(with_k=False)
@click.pass_obj
def ablate_k(runner: ExperimentRunner, ks: Optional[str], **overrides):
    """RNG experiment across group sizes."""
    _echo_report(runner.ablate(_parse_ks(ks) if ks else None, **overrides))


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and map failures to exit codes."""
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="mdpo", standalone_mode=False)
        return EXIT_OK
    except click.ClickException as e:
        e.show()
        return EXIT_CONFIG_ERROR
    except click.Abort:
        return EXIT_CONFIG_ERROR
    except TrainingAbortedError as e:
        logger.error(f"Training aborted: {e}")
        click.echo(f"Error: {e}", err=True)
        return EXIT_TRAINING_ABORTED
    except (ConfigError, ValueError, FileNotFoundError) as e:
        logger.error(f"Failed to run command: {e}")
        click.echo(f"Error: {e}", err=True)
        return EXIT_CONFIG_ERROR
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        click.echo(f"Internal error: {e}", err=True)
        return EXIT_UNEXPECTED


if __name__ == '__main__':
    sys.exit(run())
