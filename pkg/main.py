#!/usr/bin/env python3
"""mindskill command-line entry point: logging bootstrap and the click command group."""
import logging
import os
import sys
from typing import Optional

import click

from commands import cmd_demo, cmd_eval, cmd_inspect, cmd_mine
from config import ConfigError, load_config
from utils.privacy_log_handler import PrivacyLogFilter, add_privacy_filter_to_logger

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILE = 'mindskill.log'

logger = logging.getLogger(__name__)


def configure_logging(level: int = logging.INFO, log_file: Optional[str] = LOG_FILE) -> None:
    """Install console and file handlers on the root logger, both behind the privacy filter."""
    privacy_filter = PrivacyLogFilter()
    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    # Clear any existing handlers
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    console_handler.setLevel(level)
    console_handler.addFilter(privacy_filter)
    root_logger.addHandler(console_handler)

    if log_file and not os.environ.get("MINDSKILL_NO_LOG_FILE"):
        file_handler = logging.FileHandler(log_file, mode='a', encoding='utf-8')
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        file_handler.setLevel(logging.DEBUG)
        file_handler.addFilter(privacy_filter)
        root_logger.addHandler(file_handler)

    # Request payloads pass through the client loggers at DEBUG
    for name in ('openai', 'openai._base_client', 'httpx', 'httpcore'):
        add_privacy_filter_to_logger(logging.getLogger(name))
    logging.getLogger('httpx').setLevel(logging.WARNING)
    logging.getLogger('httpcore').setLevel(logging.WARNING)


def _split_ids(value: Optional[str]):
    if not value:
        return None
    return [part.strip() for part in value.split(",") if part.strip()]


def _load(config_path: Optional[str], **overrides):
    try:
        return load_config(config_path, overrides)
    except ConfigError as e:
        click.echo(f"ERROR: {e}", err=True)
        sys.exit(2)


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Log at DEBUG level')
@click.option('--quiet-log-file', is_flag=True, help=f'Do not write {LOG_FILE}')
def cli(verbose, quiet_log_file):
    """Mine reusable agent skills from solved tasks and evaluate them on held-out tasks."""
    configure_logging(logging.DEBUG if verbose else logging.INFO, None if quiet_log_file else LOG_FILE)


@cli.command()
@click.option('--config', 'config_path', type=click.Path(), help='JSON config file')
@click.option('--tasks', help='Comma-separated training task ids (default: every training task)')
@click.option('--q', type=int, help='Optimization iterations per task')
@click.option('--parallel', type=int, help='Tasks mined concurrently')
def mine(config_path, tasks, q, parallel):
    """Optimize one skill per training task and store it in the library."""
    config = _load(config_path, **{"max_iterations": q, "parallel": parallel})
    sys.exit(cmd_mine(config, _split_ids(tasks)))


@cli.command(name='eval')
@click.option('--config', 'config_path', type=click.Path(), help='JSON config file')
@click.option('--tasks', help='Comma-separated held-out task ids (default: every held-out task)')
@click.option('--k', type=int, help='Skills retrieved per task')
@click.option('--baseline', is_flag=True, help='Also run every task without skills')
@click.option('--snapshot', type=int, help='Evaluate the library as it stood after this iteration')
@click.option('--parallel', type=int, help='Tasks evaluated concurrently')
def eval_command(config_path, tasks, k, baseline, snapshot, parallel):
    """Evaluate held-out tasks with the top-K retrieved skills injected."""
    config = _load(config_path, **{"retrieval.k": k, "parallel": parallel})
    sys.exit(cmd_eval(config, _split_ids(tasks), baseline=baseline, snapshot=snapshot))


@cli.command()
@click.argument('target')
@click.option('--config', 'config_path', type=click.Path(), help='JSON config file')
def inspect(target, config_path):
    """Show the library, a run (run:<task>), a skill (skill:<task>) or loss curves (losses)."""
    sys.exit(cmd_inspect(_load(config_path), target))


@cli.command()
@click.option('--workdir', default='demo_output', show_default=True, type=click.Path(), help='Output directory for the demo run')
def demo(workdir):
    """Run the scripted end-to-end demo (no network, no credentials)."""
    sys.exit(cmd_demo(workdir))


if __name__ == "__main__":
    cli()
