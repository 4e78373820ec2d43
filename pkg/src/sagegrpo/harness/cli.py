"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 run divergence,
3 verification failure.
"""

from __future__ import annotations

import logging
import sys

import click

from ..dynamics import ITO_SIGN
from ..errors import CheckpointError, ConfigError, TrainingDivergedError
from . import runners
from .config import load_config

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_VERIFY = 3


def _common(fn):
    fn = click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
                      help="Input checkpoint.")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=None,
                      help="Output directory (overrides out_dir).")(fn)
    fn = click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None,
                      help="Seed override.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                      default=None, help="Config file (dotted key = value lines).")(fn)
    return fn


def _run(body, config_path, seed, out):
    try:
        cfg = load_config(config_path, seed, out)
        body(cfg)
    except (ConfigError, CheckpointError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except TrainingDivergedError as exc:
        click.echo(f"run diverged: {exc}", err=True)
        sys.exit(EXIT_DIVERGED)
    except runners.VerificationFailed as exc:
        click.echo(f"verification failed: {exc}", err=True)
        sys.exit(EXIT_VERIFY)
    sys.exit(EXIT_OK)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Manifold-aware SDE exploration and dual-KL GRPO on a 2-D toy flow."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")


@main.command()
@_common
def pretrain(config_path, seed, out, checkpoint):
    """Flow-matching pretraining; writes a checkpoint and the loss curve."""
    _run(runners.run_pretrain, config_path, seed, out)


@main.command()
@_common
def align(config_path, seed, out, checkpoint):
    """GRPO alignment with the configured KL trust region."""
    _run(lambda cfg: runners.run_align(cfg, checkpoint), config_path, seed, out)


@main.command("analyze-std")
@_common
def analyze_std(config_path, seed, out, checkpoint):
    """Per-step transition std for regimes a, b, c."""
    _run(runners.run_analyze_std, config_path, seed, out)


@main.command("analyze-gradnorm")
@_common
def analyze_gradnorm(config_path, seed, out, checkpoint):
    """Monte-Carlo log-prob gradient norms against the 1/sqrt(variance) law."""
    _run(lambda cfg: runners.run_analyze_gradnorm(cfg, checkpoint), config_path, seed, out)


@main.command("compare-kl")
@_common
def compare_kl(config_path, seed, out, checkpoint):
    """Run every KL mode with the same seed and budget."""
    _run(lambda cfg: runners.run_compare_kl(cfg, checkpoint), config_path, seed, out)


@main.command()
@_common
@click.option("--flip-ito-sign", is_flag=True, hidden=True)
def verify(config_path, seed, out, checkpoint, flip_ito_sign):
    """Run the oracle suite and print measured vs tolerated error."""
    sign = -ITO_SIGN if flip_ito_sign else ITO_SIGN
    _run(lambda cfg: runners.run_verify(cfg, sign, echo=click.echo), config_path, seed, out)


if __name__ == "__main__":
    main()
