"""Command-line entry points: generate, train, eval, visualize.

Every command takes the same config file; artifacts land under the configured
output directory together with the producing config hash. Exit codes: 0 on
success, 2 on configuration errors, 3 on numerical failures.
"""

from __future__ import annotations

import functools
import json
import os
import sys

import click
import numpy as np

from . import classifier as classifier_mod
from . import evaluation, inference, synthdata
from .config import (
    ExperimentConfig,
    config_hash,
    default_config,
    load_config,
    write_config,
)
from .exceptions import ConfigError, NumericalError


def _resolve_config(config_path, seed, out_dir) -> ExperimentConfig:
    overrides = {}
    if seed is not None:
        overrides["seed"] = int(seed)
    if out_dir is not None:
        overrides["out_dir"] = os.fspath(out_dir)
    if config_path is None:
        return default_config(overrides)
    return load_config(config_path, overrides)


def _exit_codes(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ConfigError as err:
            click.echo(f"config error: {err}", err=True)
            sys.exit(2)
        except NumericalError as err:
            click.echo(f"numerical failure: {err}", err=True)
            sys.exit(3)

    return wrapper


def _common_options(func):
    func = click.option("--config", "config_path", type=click.Path(), default=None,
                        help="Experiment config file.")(func)
    func = click.option("--seed", type=int, default=None, help="Override the config seed.")(func)
    func = click.option("--out", "out_dir", type=click.Path(), default=None,
                        help="Override the output directory.")(func)
    return func


@click.group()
def main():
    """Region-sparse interpretable classification experiments."""


@main.command()
@_common_options
@click.option("--overwrite", is_flag=True, help="Replace an incompatible existing dataset.")
@_exit_codes
def generate(config_path, seed, out_dir, overwrite):
    """Render the synthetic dataset and cache region partitions."""
    cfg = _resolve_config(config_path, seed, out_dir)
    spec = cfg.data_spec()
    data_dir = cfg.data_dir
    manifest_path = os.path.join(data_dir, "manifest.json")
    if os.path.exists(manifest_path):
        existing = synthdata.read_manifest(data_dir)
        if existing.get("spec") == _spec_as_manifest(spec):
            try:
                synthdata.load_dataset(data_dir)
                click.echo(f"dataset up to date at {data_dir}")
                return
            except ConfigError:
                pass
        if not overwrite:
            raise ConfigError(
                f"incompatible dataset already at {data_dir}; use --overwrite to replace"
            )
    click.echo(f"generating {spec.train_count}+{spec.test_count} instances ...")
    dataset = synthdata.generate(spec)
    manifest = synthdata.save_dataset(data_dir, dataset)
    _write_hash(data_dir, cfg)
    click.echo(f"wrote dataset to {data_dir} ({manifest['checksums']['train'][:12]}...)")


def _spec_as_manifest(spec) -> dict:
    from dataclasses import asdict

    raw = asdict(spec)
    return json.loads(json.dumps(raw))


def _write_hash(directory, cfg: ExperimentConfig) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "config_hash.txt"), "w") as handle:
        handle.write(config_hash(cfg) + "\n")


@main.command()
@_common_options
@click.option("--variant", type=click.Choice(["full", "blackbox"]), default="full",
              help="Train the full pipeline or the unmasked reference classifier.")
@_exit_codes
def train(config_path, seed, out_dir, variant):
    """Train on the generated dataset, logging per-epoch loss components."""
    cfg = _resolve_config(config_path, seed, out_dir)
    dataset = synthdata.load_dataset(cfg.data_dir)
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_config(cfg, os.path.join(cfg.out_dir, "config_used.ini"))
    _write_hash(cfg.out_dir, cfg)
    ckpt_dir = os.path.join(cfg.out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    log_path = os.path.join(
        cfg.out_dir, "train_log.jsonl" if variant == "full" else "blackbox_log.jsonl"
    )
    log_handle = open(log_path, "w")
    step_log_handle = None
    schedule = cfg.schedule()
    metadata = {"region_settings": cfg.region_settings(), "num_classes": cfg.num_classes}

    try:
        if variant == "blackbox":
            epoch_counter = {"epoch": 0}

            def bb_callback(net, metrics):
                epoch_counter["epoch"] += 1
                record = {"epoch": epoch_counter["epoch"]}
                record.update(metrics.to_record())
                log_handle.write(json.dumps(record) + "\n")
                log_handle.flush()

            net, history = classifier_mod.train_blackbox(
                dataset.train,
                schedule,
                seed=cfg.seed,
                num_classes=cfg.num_classes,
                classifier_width=cfg.classifier_width,
                epoch_callback=bb_callback,
            )
            path = os.path.join(ckpt_dir, "blackbox.pt")
            classifier_mod.save_blackbox(path, net, config_hash(cfg))
            click.echo(f"blackbox checkpoint at {path}")
            return

        total_steps = classifier_mod.plan_total_steps(schedule, len(dataset.train))
        state = classifier_mod.create_train_state(
            schedule,
            total_steps,
            seed=cfg.seed,
            num_classes=cfg.num_classes,
            embedding_dim=cfg.embedding_dim,
            selector_width=cfg.selector_width,
            classifier_width=cfg.classifier_width,
        )

        step_log_handle = open(os.path.join(cfg.out_dir, "train_steps.jsonl"), "w")

        def callback(train_state, metrics):
            record = {"epoch": train_state.epoch, "step": train_state.step}
            record.update(metrics.to_record())
            log_handle.write(json.dumps(record) + "\n")
            log_handle.flush()
            if train_state.epoch % cfg.checkpoint_every == 0:
                classifier_mod.save_checkpoint(
                    os.path.join(ckpt_dir, f"epoch_{train_state.epoch:04d}.pt"),
                    train_state,
                    config_hash(cfg),
                    metadata,
                )

        def step_callback(record):
            step_log_handle.write(json.dumps(record) + "\n")

        try:
            classifier_mod.fit(
                state, dataset.train, epoch_callback=callback, step_callback=step_callback
            )
        except NumericalError:
            click.echo("aborting; last good checkpoint retained", err=True)
            raise
        classifier_mod.save_checkpoint(
            os.path.join(ckpt_dir, "final.pt"), state, config_hash(cfg), metadata
        )
        click.echo(f"final checkpoint at {os.path.join(ckpt_dir, 'final.pt')}")
    finally:
        log_handle.close()
        if step_log_handle is not None:
            step_log_handle.close()


DELTA_SWEEP_DEFAULT = (0.8, 0.9, 0.95, 0.99)


@main.command(name="eval")
@_common_options
@click.option("--checkpoint", type=click.Path(exists=False), default=None,
              help="Checkpoint path; defaults to OUT/checkpoints/final.pt.")
@click.option("--delta", type=float, default=None, help="Certainty target override.")
@click.option("--fixed-tau", "fixed_taus", type=float, multiple=True,
              help="Additional fixed-budget evaluations.")
@click.option("--delta-sweep", is_flag=True, help="Sweep delta over {0.8, 0.9, 0.95, 0.99}.")
@click.option("--matched", is_flag=True,
              help="Add fixed-budget runs at the dynamic mean and half of it.")
@click.option("--blackbox", "blackbox_path", type=click.Path(), default=None,
              help="Blackbox checkpoint for the accuracy reference.")
@_exit_codes
def eval_cmd(config_path, seed, out_dir, checkpoint, delta, fixed_taus, delta_sweep,
             matched, blackbox_path):
    """Evaluate a checkpoint: metrics, baselines, fidelity curves, ablations."""
    cfg = _resolve_config(config_path, seed, out_dir)
    dataset = synthdata.load_dataset(cfg.data_dir)
    if checkpoint is None:
        checkpoint = os.path.join(cfg.out_dir, "checkpoints", "final.pt")
    if not os.path.exists(checkpoint):
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    state, info = classifier_mod.load_checkpoint(checkpoint)

    stored = info.get("metadata", {}).get("region_settings")
    if stored is not None and stored != cfg.region_settings():
        raise ConfigError(
            f"checkpoint region settings {stored} do not match dataset settings "
            f"{cfg.region_settings()}"
        )
    if state.classifier.num_classes != cfg.num_classes:
        raise ConfigError(
            f"checkpoint has {state.classifier.num_classes} classes, config has {cfg.num_classes}"
        )

    policy = inference.ThresholdPolicy(
        delta=delta if delta is not None else cfg.delta,
        tau_grid=inference.default_tau_grid(cfg.tau_step),
        cutoff=cfg.cutoff,
    )
    report = evaluation.evaluate(
        state,
        dataset.test,
        policy,
        seed=cfg.seed,
        delta_sweep=DELTA_SWEEP_DEFAULT if delta_sweep else (),
        fixed_taus=fixed_taus,
        matched=matched,
        half_matched=matched,
        config_hash=config_hash(cfg),
    )
    if blackbox_path is not None:
        blackbox, _ = classifier_mod.load_blackbox(blackbox_path)
        report.blackbox_accuracy = evaluation.classifier_accuracy(blackbox, dataset.test)

    os.makedirs(cfg.out_dir, exist_ok=True)
    report_path = os.path.join(cfg.out_dir, "report.json")
    evaluation.write_report(report, report_path)
    evaluation.write_curves_csv(report, os.path.join(cfg.out_dir, "curves"))
    _write_hash(cfg.out_dir, cfg)
    click.echo(
        f"accuracy={report.accuracy:.4f} localization={report.mean_localization:.4f} "
        f"mean_tau={report.mean_chosen_tau:.4f} report={report_path}"
    )


@main.command()
@_common_options
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("-n", "count", type=int, default=4, help="Number of test instances to render.")
@_exit_codes
def visualize(config_path, seed, out_dir, checkpoint, count):
    """Write PNG triplets (partition overlay, masked input, embedding colors)."""
    cfg = _resolve_config(config_path, seed, out_dir)
    dataset = synthdata.load_dataset(cfg.data_dir)
    if count > len(dataset.test):
        raise ConfigError(f"requested {count} instances, test split has {len(dataset.test)}")
    if checkpoint is None:
        checkpoint = os.path.join(cfg.out_dir, "checkpoints", "final.pt")
    if not os.path.exists(checkpoint):
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    state, _ = classifier_mod.load_checkpoint(checkpoint)
    policy = inference.ThresholdPolicy(
        delta=cfg.delta, tau_grid=inference.default_tau_grid(cfg.tau_step), cutoff=cfg.cutoff
    )

    rng = np.random.default_rng(cfg.seed)
    chosen = rng.choice(len(dataset.test), size=count, replace=False)
    image_dir = os.path.join(cfg.out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    for index in sorted(int(i) for i in chosen):
        inst = dataset.test[index]
        explanation = inference.dynamic_threshold(
            state.selector, state.classifier, inst.image, inst.partition, policy
        )
        _save_visualization(image_dir, index, inst, explanation)
    _write_hash(cfg.out_dir, cfg)
    click.echo(f"wrote {3 * count} images to {image_dir}")


def _save_visualization(image_dir, index, inst, explanation) -> None:
    from PIL import Image

    def to_png(array_hw3, name):
        data = np.clip(array_hw3 * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(data).save(os.path.join(image_dir, f"{index:04d}_{name}.png"))

    original = np.moveaxis(np.asarray(inst.image, dtype=np.float64), 0, -1)
    labels = inst.partition.labels
    boundary = np.zeros(labels.shape, dtype=bool)
    boundary[1:, :] |= labels[1:, :] != labels[:-1, :]
    boundary[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    overlay = original.copy()
    overlay[boundary] = np.array([1.0, 0.15, 0.15])
    to_png(overlay, "original")

    to_png(np.moveaxis(explanation.x_m.astype(np.float64), 0, -1), "masked")

    colors = explanation.embedding_colors
    span = colors.max() - colors.min()
    normalized = (colors - colors.min()) / (span if span > 0 else 1.0)
    to_png(normalized, "embedding")


if __name__ == "__main__":
    main()
