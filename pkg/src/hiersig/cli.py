"""Operator command-line surface.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numerical
failure.  Every command resolves the effective config (presets, file, env
overrides), derives the run directory from the config hash, and is
idempotent given identical inputs and seed.
"""

from __future__ import annotations

import json
import logging
import sys

import click

from .config import (ConfigError, MissingArtifactError, NumericalError,
                     config_hash, config_schema, load_config)
from .pipeline import RunPaths

log = logging.getLogger("hiersig")

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


class JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(),
                           "name": record.name,
                           "message": record.getMessage()})


def _setup_logging(fmt: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if fmt == "json":
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("hiersig")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)


def _resolve(ctx) -> tuple[dict, RunPaths]:
    opts = ctx.obj
    overrides: dict = {}
    if opts["seed"] is not None:
        overrides["seed"] = opts["seed"]
    if opts["workdir"] is not None:
        overrides.setdefault("run", {})["workdir"] = opts["workdir"]
    if opts["log_format"] is not None:
        overrides.setdefault("run", {})["log_format"] = opts["log_format"]
    cfg = load_config(opts["config"], scale=opts["scale"], overrides=overrides)
    _setup_logging(cfg["run"]["log_format"])
    paths = RunPaths.for_config(cfg)
    paths.root.mkdir(parents=True, exist_ok=True)
    log.info("run dir %s (config hash %s)", paths.root, config_hash(cfg))
    return cfg, paths


def _run(ctx, fn, *args, **kwargs):
    try:
        cfg, paths = _resolve(ctx)
        return fn(cfg, paths, *args, **kwargs)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except MissingArtifactError as exc:
        click.echo(f"missing artifact: {exc}", err=True)
        sys.exit(EXIT_MISSING)
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)


@click.group()
@click.option("--config", type=click.Path(), default=None,
              help="YAML run configuration.")
@click.option("--scale", type=click.Choice(["desk", "paper"]), default="desk")
@click.option("--seed", type=int, default=None, help="master seed override")
@click.option("--workdir", type=click.Path(), default=None)
@click.option("--log-format", type=click.Choice(["text", "json"]), default=None)
@click.pass_context
def main(ctx, config, scale, seed, workdir, log_format):
    """Hierarchical self-supervised pipeline for week-long wearable streams."""
    ctx.obj = {"config": config, "scale": scale, "seed": seed,
               "workdir": workdir, "log_format": log_format}


@main.command("schema")
def schema_cmd():
    """Print the JSON schema of the run configuration."""
    click.echo(json.dumps(config_schema(), indent=2, sort_keys=True))


@main.command("synth-gen")
@click.pass_context
def synth_gen(ctx):
    """Generate the synthetic cohort (recordings, labels, split)."""
    from .pipeline import run_synth
    _run(ctx, run_synth)


@main.command("preprocess")
@click.pass_context
def preprocess(ctx):
    """Raw recordings to normalized 15 s segment shards."""
    from .pipeline import run_preprocess
    _run(ctx, run_preprocess)


@main.command("features")
@click.pass_context
def features_cmd(ctx):
    """Per-segment handcrafted features and weekly feature sequences."""
    from .pipeline import run_features
    _run(ctx, run_features)


@main.command("pretrain-stage1")
@click.option("--resume", is_flag=True, default=False)
@click.pass_context
def pretrain_stage1(ctx, resume):
    """Train the subject-contrastive segment encoder."""
    from .pipeline import run_stage1
    _run(ctx, run_stage1, resume=resume)


@main.command("embed-segments")
@click.pass_context
def embed_segments(ctx):
    """Export frozen segment embeddings and weekly bin sequences."""
    from .pipeline import run_embed_segments
    _run(ctx, run_embed_segments)


@main.command("pretrain-stage2")
@click.option("--variant", type=click.Choice(["pipeline", "behavior"]),
              default="pipeline")
@click.option("--ablate", type=click.Choice(["no-local", "no-global"]),
              default=None, help="disable one decoder branch")
@click.option("--n-ctx", type=int, default=None, help="context-set size override")
@click.option("--week-token", type=click.Choice(["pooled", "learnable"]),
              default=None)
@click.option("--resume", is_flag=True, default=False)
@click.pass_context
def pretrain_stage2(ctx, variant, ablate, n_ctx, week_token, resume):
    """Train the temporal encoder with dual-branch masked reconstruction.

    Override flags write a variant checkpoint under stage2_ablations/ and
    leave the main pipeline artifact untouched.
    """
    from .pipeline import run_stage2
    overrides = {}
    if ablate == "no-local":
        overrides["local_branch"] = False
    elif ablate == "no-global":
        overrides["global_branch"] = False
    if n_ctx is not None:
        overrides["n_ctx"] = n_ctx
    if week_token is not None:
        overrides["week_token"] = week_token

    def _go(cfg, paths):
        out = None
        if overrides:
            suffix = "_".join(f"{k}-{v}" for k, v in sorted(overrides.items()))
            out = paths.ablations_dir / f"cli_{variant}_{suffix}.ck1"
        result = run_stage2(cfg, paths, variant=variant,
                            overrides=overrides or None, resume=resume,
                            out_path=out)
        if out is not None:
            click.echo(str(out))
        return result

    _run(ctx, _go)


@main.command("embed-weeks")
@click.option("--scenario", "scenarios", multiple=True,
              type=click.Choice(["all", "day", "night", "weekday", "weekend"]))
@click.pass_context
def embed_weeks(ctx, scenarios):
    """Week vectors for every probe model under each missingness scenario."""
    from .pipeline import run_embed_weeks
    _run(ctx, run_embed_weeks, scenarios=list(scenarios) or None)


@main.command("train-baselines")
@click.pass_context
def train_baselines(ctx):
    """Train the supervised temporal aggregators on frozen embeddings."""
    from .pipeline import run_train_baselines
    _run(ctx, run_train_baselines)


@main.command("probe")
@click.option("--scenario", "scenarios", multiple=True,
              type=click.Choice(["all", "day", "night", "weekday", "weekend"]))
@click.pass_context
def probe(ctx, scenarios):
    """Linear probing over the model/task/scenario grid."""
    from .pipeline import run_probe
    _run(ctx, run_probe, scenarios=list(scenarios) or None)


@main.command("report")
@click.option("--force", is_flag=True, default=False,
              help="aggregate even if config hashes disagree")
@click.pass_context
def report(ctx, force):
    """Aggregate CSVs, win-rate matrix, radar, and latent-space analyses."""
    from .reporting import run_report
    _run(ctx, run_report, force=force)


@main.command("reproduce")
@click.option("--no-ablations", is_flag=True, default=False)
@click.option("--no-supervised", is_flag=True, default=False)
@click.pass_context
def reproduce(ctx, no_ablations, no_supervised):
    """Run the full experiment end to end on the synthetic cohort."""
    from .reporting import run_reproduce
    _run(ctx, run_reproduce, with_ablations=not no_ablations,
         with_supervised=not no_supervised)


if __name__ == "__main__":
    main()
