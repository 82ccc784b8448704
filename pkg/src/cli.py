"""
Command line interface.

    dcgmm info --arch "F(28,1)-G(49)" --input 28x28x1
    dcgmm train --config experiment.env
    dcgmm sample --model runs/model.dcgmm --n 64 --out samples.png

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical abort during training.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Optional

import click
import numpy as np
from pydantic import ValidationError

from .config import settings
from .engine import checkpoint
from .engine.errors import ConfigurationError, DcgmmError, NumericalAbortError, UsageError
from .engine.evaluation import export_alphabet, layerwise_auc, outlier_roc
from .engine.generation import ERASE_SIDES, half_mask, inpaint, sample
from .engine.model_graph import DcgmmModel, count_parameters, parameter_report, parse_config, reference_table
from .engine.tensor_core import Shape3
from .engine.training import score_samples, train
from .extractors.idx_loader import Dataset, filter_classes, load_dataset, parse_class_set
from .models.schemas import ExperimentConfig, SamplerConfig, SamplingPrior, SharpenConfig, load_training_overrides
from .utils.png_grid import write_png_grid
from .utils.reports import layer_means, write_frame, write_scores

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class DcgmmGroup(click.Group):
    """Maps package exceptions onto process exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.show()
            ctx.exit(UsageError.exit_code)
        except DcgmmError as e:
            click.echo(f"error: {e}", err=True)
            ctx.exit(e.exit_code)
        except (ValueError, ValidationError) as e:
            click.echo(f"error: {e}", err=True)
            ctx.exit(UsageError.exit_code)


def configure_logging(level: str) -> None:
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT)


def derive_seed(*parts) -> int:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part if isinstance(part, bytes) else str(part).encode("utf-8"))
    seed = int.from_bytes(digest.digest()[:4], "big")
    logger.info("no seed given, derived seed %d", seed)
    return seed


def _dataset(images: str, labels: Optional[str], classes: Optional[str] = None, cap: Optional[int] = None) -> Dataset:
    ds = load_dataset(images, labels)
    keep = parse_class_set(classes)
    if keep is not None or cap is not None:
        ds = filter_classes(ds, keep if keep is not None else ds.classes, cap)
    return ds


def _sampler_configs(seed, top_s, variance_scale, sharpen_iterations, sharpen_step, prior="uniform") -> tuple[SamplerConfig, SharpenConfig]:
    try:
        sampler = SamplerConfig(top_s=top_s, seed=seed, variance_scale=variance_scale, prior=prior)
        sharpening = SharpenConfig(
            iterations=sharpen_iterations if sharpen_iterations is not None else settings.SHARPEN_ITERATIONS,
            step=sharpen_step if sharpen_step is not None else settings.SHARPEN_STEP,
        )
    except ValidationError as e:
        raise ConfigurationError(str(e)) from e
    return sampler, sharpening


def sampling_options(func):
    for option in reversed(
        [
            click.option("--seed", type=int, help="RNG seed (derived from the checkpoint when omitted)"),
            click.option("--top-s", type=int, help="Keep only the S strongest control entries per position"),
            click.option("--variance-scale", type=float, default=1.0, show_default=True),
            click.option(
                "--sharpen-iterations",
                type=int,
                default=None,
                help="Sharpening steps per folding layer [default: DCGMM_SHARPEN_ITERATIONS]",
            ),
            click.option("--sharpen-step", type=float, default=None),
            click.option(
                "--prior",
                type=click.Choice([p.value for p in SamplingPrior]),
                default=SamplingPrior.UNIFORM.value,
                show_default=True,
                help="Component distribution at the top cGMM when sampling without a class",
            ),
        ]
    ):
        func = option(func)
    return func


@click.group(cls=DcgmmGroup)
@click.option("--log-level", default=None, help="Overrides DCGMM_LOG_LEVEL")
def cli(log_level):
    """Deep convolutional Gaussian mixture models."""
    configure_logging(log_level or settings.LOG_LEVEL)


@cli.command()
@click.option("--arch", help="Architecture string, e.g. 'F(28,1)-G(49)'")
@click.option("--input", "input_shape", default="28x28x1", show_default=True)
@click.option("--reference", is_flag=True, help="Print the reference architecture table")
@click.option("--verbose", is_flag=True, help="Also report every trainable value")
def info(arch, input_shape, reference, verbose):
    """Shapes and parameter counts of an architecture."""
    if reference:
        click.echo(reference_table().to_string(index=False))
        if not arch:
            return
    if not arch:
        raise UsageError("info needs --arch or --reference")
    config = parse_config(arch, input_shape)
    report = parameter_report(config)
    click.echo(f"architecture: {config.architecture}")
    click.echo(f"input: {Shape3(*config.input_shape)}")
    click.echo(report.to_string(index=False))
    click.echo(f"parameters: {count_parameters(config)}")
    if verbose:
        click.echo(f"trainable values: {int(report['trainable'].sum())}")


@cli.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--training", "training_path", type=click.Path(exists=True, dir_okay=False), help="key=value schedule overrides")
@click.option("--seed", type=int)
@click.option("--out", "out_dir", type=click.Path(file_okay=False))
@click.option("--progress/--no-progress", default=False)
def train_command(config_path, training_path, seed, out_dir, progress):
    """Train a model from an experiment config; writes model.dcgmm and train_log.csv."""
    config = ExperimentConfig.from_file(config_path, {"seed": seed, "output_dir": out_dir})
    seed = config.seed if config.seed is not None else derive_seed(Path(config_path).read_bytes())
    overrides = load_training_overrides(training_path) if training_path else {}
    try:
        schedule = config.schedule({**overrides, "seed": seed, "progress": progress})
    except ValidationError as e:
        raise ConfigurationError(f"invalid training schedule: {e}") from e

    model = DcgmmModel.from_architecture(config.architecture, config.input_shape, seed=seed, name=config.name)
    train_set = _dataset(config.train_images, config.train_labels, config.classes, config.per_class_cap)
    held_out = None
    if config.test_images:
        held_out = _dataset(config.test_images, config.test_labels, config.classes)

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, log = train(model, train_set, schedule, held_out=held_out)
    except NumericalAbortError as e:
        snapshot = out / "abort_snapshot.json"
        snapshot.write_text(json.dumps(e.snapshot, indent=2, sort_keys=True))
        click.echo(f"training aborted, snapshot written to {snapshot}", err=True)
        raise

    checkpoint.save(model, out / "model.dcgmm")
    log.to_csv(out / "train_log.csv")
    if log.accuracies:
        write_frame(log.accuracy_frame(), out / "accuracy.csv")
    click.echo(f"trained {model.architecture} for {log.total_steps} steps (seed {seed}) -> {out / 'model.dcgmm'}")


@cli.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--images", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--labels", type=click.Path(exists=True, dir_okay=False))
@click.option("--classes", help="Class subset, e.g. '1-9'")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--full", is_flag=True, help="Score with the full mixture log-likelihood")
@click.option("--batch-size", type=int, default=None)
def density(model_path, images, labels, classes, out_path, full, batch_size):
    """Per-sample log-likelihood of every cGMM layer."""
    model = checkpoint.load(model_path)
    ds = _dataset(images, labels, classes)
    scores = score_samples(model, ds, batch_size, full=full)
    write_scores(scores, out_path, labels=ds.labels, column="full_loglik" if full else "loss")
    click.echo(layer_means(scores).to_string(index=False))


@cli.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--images", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--labels", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--inliers", required=True, help="Inlier classes, e.g. '1-9'")
@click.option("--outliers", required=True, help="Outlier classes, e.g. '0'")
@click.option("--layer", type=int, default=None, help="cGMM layer index (default: topmost)")
@click.option("--cap", type=int, default=None, help="Samples per class")
@click.option("--all-layers", is_flag=True, help="Also write the AUC of every cGMM layer")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def outlier(model_path, images, labels, inliers, outliers, layer, cap, all_layers, out_path):
    """ROC curve and AUC of log-likelihood based outlier detection."""
    model = checkpoint.load(model_path)
    ds = load_dataset(images, labels)
    inlier_set = filter_classes(ds, parse_class_set(inliers), cap)
    outlier_set = filter_classes(ds, parse_class_set(outliers), cap)
    curve = outlier_roc(model, layer, inlier_set, outlier_set)
    write_frame(curve.to_frame(), out_path)
    click.echo(f"AUC: {curve.auc:.4f}")
    if all_layers:
        table = layerwise_auc(model, inlier_set, outlier_set)
        out = Path(out_path)
        write_frame(table, out.with_name(out.stem + "_layers.csv"))
        click.echo(table.to_string(index=False))


@cli.command("sample")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--n", "count", type=int, default=64, show_default=True)
@click.option("--cols", type=int, default=8, show_default=True)
@click.option("--class", "class_index", type=int, default=None, help="Condition on a class (needs a classifier)")
@sampling_options
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--losses", "losses_path", type=click.Path(dir_okay=False), help="CSV of re-forwarded sample losses")
def sample_command(model_path, count, cols, class_index, seed, top_s, variance_scale, sharpen_iterations, sharpen_step, prior, out_path, losses_path):
    """Generate samples into a PNG grid."""
    model = checkpoint.load(model_path)
    if seed is None:
        seed = derive_seed(Path(model_path).read_bytes(), "sample", count, class_index)
    sampler, sharpening = _sampler_configs(seed, top_s, variance_scale, sharpen_iterations, sharpen_step, prior)
    images = sample(model, class_index, sampler, sharpening, n=count)
    write_png_grid(images, cols, out_path)
    if losses_path:
        write_scores(score_samples(model, images), losses_path)
    click.echo(f"wrote {count} samples to {out_path}")


@cli.command("inpaint")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--images", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--labels", type=click.Path(exists=True, dir_okay=False))
@click.option("--classes", help="Class subset, e.g. '0-9'")
@click.option("--n", "count", type=int, default=16, show_default=True)
@click.option("--erase", type=click.Choice(ERASE_SIDES), default="right", show_default=True)
@sampling_options
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def inpaint_command(model_path, images, labels, classes, count, erase, seed, top_s, variance_scale, sharpen_iterations, sharpen_step, prior, out_path):
    """Complete half-erased images; rows show masked input, completion and original."""
    model = checkpoint.load(model_path)
    ds = _dataset(images, labels, classes)
    originals = ds.images[:count]
    if seed is None:
        seed = derive_seed(Path(model_path).read_bytes(), "inpaint", count, erase)
    sampler, sharpening = _sampler_configs(seed, top_s, variance_scale, sharpen_iterations, sharpen_step, prior)
    mask = half_mask(originals.shape[1], originals.shape[2], erase)
    completed = inpaint(model, originals, mask, sampler, sharpening)

    masked = np.where(mask[None, :, :, None], originals, 0.0)
    rows = np.stack([masked, completed, originals], axis=1).reshape((-1,) + originals.shape[1:])
    write_png_grid(rows, 3, out_path)
    erased = ~mask
    mse = float(np.mean((completed - originals)[:, erased] ** 2))
    click.echo(f"in-painted {len(originals)} images, MSE on erased {erase} half: {mse:.5f}")


@cli.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--layer", type=int, default=None, help="cGMM layer index (default: lowest)")
@click.option("--cols", type=int, default=7, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def alphabet(model_path, layer, cols, out_path):
    """Centroids of a folding-fed cGMM rendered as patches."""
    model = checkpoint.load(model_path)
    sheet = export_alphabet(model, layer if layer is not None else model.cgmm_indices[0])
    clamped = write_png_grid(sheet.patches, cols, out_path)
    click.echo(f"wrote {sheet.K} {sheet.kernel}x{sheet.kernel} patches to {out_path} ({clamped} values clamped)")


def main(argv=None) -> int:
    try:
        code = cli.main(args=argv, prog_name="dcgmm", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return UsageError.exit_code
    except click.Abort:
        return UsageError.exit_code
    return code if isinstance(code, int) else 0
