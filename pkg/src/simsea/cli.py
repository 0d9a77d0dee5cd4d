"""Command-line entry point.

    simsea fetch|features|codebook|vectorize|match|rank|clean|evaluate -c config.json
    simsea run --all -c config.json
    simsea report -c config.json --top 10 --format table

Exit codes: 0 success, 1 validation error, 2 missing prerequisite,
3 runtime failure.
"""
from __future__ import annotations

import logging
import sys

import click

from .config import load_config
from .errors import (
    CodebookError,
    ConfigError,
    LabelsError,
    ManifestError,
    MissingPrerequisiteError,
    SimseaError,
    StaleArtifactError,
)
from .matching import METRICS
from .pipeline import (
    STAGES,
    Pipeline,
    render_report_csv,
    render_report_json,
    render_report_table,
)

log = logging.getLogger("simsea")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_MISSING_PREREQUISITE = 2
EXIT_RUNTIME = 3

_VALIDATION_ERRORS = (
    ManifestError, ConfigError, LabelsError, CodebookError, StaleArtifactError,
    ValueError,
)


def global_options(f):
    f = click.option("--config", "-c", "config_path", default="config.json",
                     show_default=True, help="Pipeline config file.")(f)
    f = click.option("--seed", type=int, default=None,
                     help="Override the config seed.")(f)
    f = click.option("--threshold", type=float, default=None,
                     help="Override the match threshold.")(f)
    f = click.option("--min-r", type=int, default=None,
                     help="Override the selection threshold on r.")(f)
    f = click.option("--metric", type=click.Choice(METRICS), default=None,
                     help="Override the distance metric.")(f)
    f = click.option("--top", type=int, default=10, show_default=True,
                     help="How many top-ranked images the report lists.")(f)
    f = click.option("--format", "fmt",
                     type=click.Choice(["table", "json", "csv"]),
                     default="table", show_default=True,
                     help="Report output format.")(f)
    f = click.option("--force", is_flag=True,
                     help="Rebuild artifacts even under a changed config digest.")(f)
    return f


def _make_pipeline(config_path, seed, threshold, min_r, metric) -> Pipeline:
    config = load_config(config_path, overrides={
        "seed": seed,
        "match_threshold": threshold,
        "min_r": min_r,
        "metric": metric,
    })
    return Pipeline(config)


@click.group()
def cli():
    """Clean cue-qualified image-search results by cross-subsearch matching."""


def _stage_command(stage: str):
    @cli.command(name=stage, help=f"Run the {stage} stage.")
    @global_options
    def _cmd(config_path, seed, threshold, min_r, metric, top, fmt, force):
        pipe = _make_pipeline(config_path, seed, threshold, min_r, metric)
        with pipe.lock():
            pipe.run_stage(stage, force=force)
    return _cmd


for _stage in STAGES:
    _stage_command(_stage)


@cli.command(name="run", help="Run the whole pipeline in stage order.")
@click.option("--all", "run_all", is_flag=True,
              help="Required; runs every stage (evaluate only with labels).")
@global_options
def run(run_all, config_path, seed, threshold, min_r, metric, top, fmt, force):
    if not run_all:
        raise click.UsageError("pass --all to run the full pipeline")
    pipe = _make_pipeline(config_path, seed, threshold, min_r, metric)
    with pipe.lock():
        executed = pipe.run_all(force=force)
    log.info("executed stage(s): %s", ", ".join(executed) if executed else "none (all fresh)")


@cli.command(name="report", help="Render the evaluation report and top-ranked images.")
@global_options
def report(config_path, seed, threshold, min_r, metric, top, fmt, force):
    pipe = _make_pipeline(config_path, seed, threshold, min_r, metric)
    payload = pipe.report_payload(top=top)
    if fmt == "json":
        click.echo(render_report_json(payload))
    elif fmt == "csv":
        click.echo(render_report_csv(payload), nl=False)
    else:
        click.echo(render_report_table(payload))


def main(argv=None) -> int:
    """Run the CLI, mapping errors to documented exit codes."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        return EXIT_VALIDATION
    except click.ClickException as exc:
        exc.show()
        return EXIT_VALIDATION
    except MissingPrerequisiteError as exc:
        log.error("%s", exc)
        return EXIT_MISSING_PREREQUISITE
    except _VALIDATION_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except SimseaError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("unexpected failure: %s", exc, exc_info=True)
        return EXIT_RUNTIME
    return EXIT_OK


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
