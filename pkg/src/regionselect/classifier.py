"""Classification backbone for masked inputs, plus training orchestration.

The classifier never sees the sparsity budget: its certainty must be a
function of the masked image alone so the budget search at inference is
well-defined. Inputs are normalized with training-split statistics and then
re-zeroed, keeping inactive pixels at exactly zero after normalization.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .batching import PackedPartitions, pack_partitions
from .exceptions import NumericalError
from .objective import (
    PROBABILITY_FLOOR,
    EpochMetrics,
    TrainSchedule,
    anneal,
    batch_sparsity_terms,
    effective_learning_rate,
    sample_tau,
)
from .selector import (
    LOGIT_CLAMP,
    MaskedImage,
    SelectorNetwork,
    aggregate_distribution_parameters,
    binarize_gumbel,
    ensure_eval_mode,
)

CHECKPOINT_FORMAT_VERSION = 1


class ClassifierNetwork(nn.Module):
    """Small convolutional classifier emitting a probability vector.

    Features are average-pooled to a coarse 3 x 3 grid before the linear head:
    full global pooling discards the spatial layout that separates shapes,
    while a finer grid memorizes positions. With a zero-initialized final
    layer the untrained network predicts uniformly for any input.
    """

    POOLED_GRID = 3

    def __init__(self, in_channels: int = 3, num_classes: int = 4, base_width: int = 20):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.base_width = base_width
        w = base_width
        self.features = nn.Sequential(
            _stage(in_channels, w, stride=1),
            _stage(w, 2 * w, stride=2),
            _stage(2 * w, 4 * w, stride=2),
            _stage(4 * w, 8 * w, stride=2),
        )
        self.head = nn.Linear(8 * w * self.POOLED_GRID**2, num_classes)
        self.register_buffer("input_mean", torch.zeros(in_channels))
        self.register_buffer("input_std", torch.ones(in_channels))

    def hyperparameters(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "base_width": self.base_width,
        }

    def set_normalization(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.input_mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
        self.input_std.copy_(torch.as_tensor(std, dtype=torch.float32).clamp(min=1e-6))

    def forward(self, x_m: torch.Tensor, pixel_mask: torch.Tensor) -> torch.Tensor:
        mean = self.input_mean.view(1, -1, 1, 1)
        std = self.input_std.view(1, -1, 1, 1)
        normalized = (x_m - mean) / std * pixel_mask.unsqueeze(1)
        feat = self.features(normalized)
        pooled = nn.functional.adaptive_avg_pool2d(feat, self.POOLED_GRID).flatten(1)
        probs = torch.softmax(self.head(pooled), dim=-1)
        if not torch.isfinite(probs).all():
            raise NumericalError("classifier produced non-finite probabilities")
        return probs


def _stage(c_in: int, c_out: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, stride=stride, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, kernel_size=3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


def classify(network: ClassifierNetwork, masked: MaskedImage) -> torch.Tensor:
    """Class probabilities for one masked image."""
    ensure_eval_mode(network)
    probs = network(masked.x_m.unsqueeze(0), masked.pixel_mask.unsqueeze(0))
    return probs.squeeze(0)


def compute_normalization(instances: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of the raw (unmasked) training images."""
    stacked = np.stack([np.asarray(inst.image, dtype=np.float64) for inst in instances])
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    return mean, np.maximum(std, 1e-6)


@dataclass
class TrainState:
    """Everything needed to continue or reproduce a training run."""

    selector: SelectorNetwork
    classifier: ClassifierNetwork
    optimizer: torch.optim.Adam
    schedule: TrainSchedule
    generator: torch.Generator
    seed: int
    total_steps: int
    step: int = 0
    epoch: int = 0


def plan_total_steps(schedule: TrainSchedule, n_instances: int) -> int:
    batches = int(np.ceil(n_instances / schedule.batch_size))
    return schedule.epochs * batches


def create_train_state(
    schedule: TrainSchedule,
    total_steps: int,
    seed: int = 0,
    in_channels: int = 3,
    num_classes: int = 4,
    embedding_dim: int = 3,
    selector_width: int = 16,
    classifier_width: int = 20,
) -> TrainState:
    torch.manual_seed(seed)
    selector = SelectorNetwork(
        in_channels=in_channels, embedding_dim=embedding_dim, base_width=selector_width
    )
    classifier = ClassifierNetwork(
        in_channels=in_channels, num_classes=num_classes, base_width=classifier_width
    )
    optimizer = torch.optim.Adam(
        list(selector.parameters()) + list(classifier.parameters()),
        lr=schedule.learning_rate,
        betas=(schedule.adam_beta1, schedule.adam_beta2),
    )
    generator = torch.Generator().manual_seed(seed + 1)
    return TrainState(
        selector=selector,
        classifier=classifier,
        optimizer=optimizer,
        schedule=schedule,
        generator=generator,
        seed=seed,
        total_steps=total_steps,
    )


def _prepare_batch(instances: Sequence, indices) -> tuple[torch.Tensor, torch.Tensor, PackedPartitions]:
    chosen = [instances[int(i)] for i in indices]
    images = torch.from_numpy(
        np.stack([np.asarray(inst.image, dtype=np.float32) for inst in chosen])
    )
    labels = torch.tensor([int(inst.label) for inst in chosen], dtype=torch.long)
    packed = pack_partitions([inst.partition for inst in chosen])
    return images, labels, packed


def forward_batch(
    selector: SelectorNetwork,
    classifier: ClassifierNetwork,
    images: torch.Tensor,
    labels: torch.Tensor,
    packed: PackedPartitions,
    taus: torch.Tensor,
    schedule: TrainSchedule,
    lambda1_eff: float,
    temperature: float,
    generator: Optional[torch.Generator] = None,
    stochastic: bool = True,
) -> dict:
    """One pipeline pass: select, mask, classify, per-instance losses.

    With stochastic=False the sampling stages collapse to their deterministic
    inference form: p = logistic(mu) thresholded at 0.5.
    """
    b = images.shape[0]
    h, w = packed.image_shape
    mu, embeddings = aggregate_distribution_parameters(selector, images, taus, packed)

    if stochastic:
        eps = torch.randn(b, embeddings.shape[1], generator=generator)
        z = mu + (embeddings * eps[packed.instance_ids]).sum(dim=1)
        p = torch.sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
        mask_values = binarize_gumbel(p, temperature, generator, hard=True)
    else:
        p = torch.sigmoid(mu.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
        mask_values = (p > 0.5).to(p.dtype)

    pixel_mask = mask_values[packed.flat_index].view(b, h, w)
    x_m = images * pixel_mask.unsqueeze(1)
    probs = classifier(x_m, pixel_mask)
    nll = -torch.log(probs[torch.arange(b), labels].clamp(min=PROBABILITY_FLOOR))

    p_bar, sparsity = batch_sparsity_terms(
        p, packed.region_sizes, packed.instance_ids, taus, b, h * w
    )
    cov_penalty = torch.stack(
        [
            (embeddings[packed.instance_slice(i)] @ embeddings[packed.instance_slice(i)].T)
            .abs()
            .sum()
            for i in range(b)
        ]
    )
    totals = nll + lambda1_eff * sparsity + schedule.lambda2 * cov_penalty
    return {
        "nll": nll,
        "sparsity": sparsity,
        "cov_penalty": cov_penalty,
        "total": totals,
        "p_bar": p_bar,
        "probs": probs,
        "pixel_mask": pixel_mask,
    }


def train_epoch(state: TrainState, instances: Sequence, step_callback=None) -> EpochMetrics:
    """One pass over the training set with per-batch optimizer steps.

    step_callback, when given, receives one record per optimizer step with the
    effective penalty weight, temperature, and the batch's budget draws, so a
    run can be audited for reproducibility.
    """
    state.selector.train()
    state.classifier.train()
    order = torch.randperm(len(instances), generator=state.generator).numpy()
    batch_size = state.schedule.batch_size
    metrics = EpochMetrics()
    sums = {"nll": 0.0, "sparsity": 0.0, "cov_penalty": 0.0, "total": 0.0, "p_bar": 0.0}
    count = 0

    for start in range(0, len(order), batch_size):
        batch_index = start // batch_size
        indices = order[start : start + batch_size]
        images, labels, packed = _prepare_batch(instances, indices)
        taus = sample_tau(state.schedule, state.generator, n=len(indices))
        lambda1_eff, temperature = anneal(state.schedule, state.step, state.total_steps)
        lr = effective_learning_rate(state.schedule, state.step, state.total_steps)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        try:
            out = forward_batch(
                state.selector,
                state.classifier,
                images,
                labels,
                packed,
                taus,
                state.schedule,
                lambda1_eff,
                temperature,
                generator=state.generator,
            )
        except NumericalError as err:
            raise NumericalError(
                f"{err} (epoch {state.epoch}, batch {batch_index})"
            ) from err
        loss = out["total"].mean()
        if not torch.isfinite(loss):
            raise NumericalError(
                f"non-finite loss in epoch {state.epoch}, batch {batch_index}"
            )
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        state.step += 1
        if step_callback is not None:
            step_callback(
                {
                    "step": state.step,
                    "lambda1": lambda1_eff,
                    "temperature": temperature,
                    "taus": [round(float(t), 6) for t in taus],
                    "loss": float(loss.detach()),
                }
            )

        n = len(indices)
        for key in sums:
            sums[key] += float(out[key].detach().sum())
        count += n
        metrics.lambda1 = lambda1_eff
        metrics.temperature = temperature
        metrics.batches += 1

    state.epoch += 1
    for key, value in sums.items():
        setattr(metrics, key, value / max(count, 1))
    return metrics


def evaluate_instance_losses(
    state: TrainState, instances: Sequence, tau: float, batch_size: int = 32
) -> np.ndarray:
    """Deterministic per-instance total losses (no sampling, no updates).

    Instances are processed independently, so the result does not depend on
    how they are batched.
    """
    state.selector.eval()
    state.classifier.eval()
    losses = []
    with torch.no_grad():
        for start in range(0, len(instances), batch_size):
            indices = np.arange(start, min(start + batch_size, len(instances)))
            images, labels, packed = _prepare_batch(instances, indices)
            taus = torch.full((len(indices),), float(tau))
            out = forward_batch(
                state.selector,
                state.classifier,
                images,
                labels,
                packed,
                taus,
                state.schedule,
                lambda1_eff=state.schedule.lambda1,
                temperature=1.0,
                stochastic=False,
            )
            losses.append(out["total"].numpy())
    return np.concatenate(losses)


def fit(
    state: TrainState,
    instances: Sequence,
    epoch_callback=None,
    step_callback=None,
) -> list[EpochMetrics]:
    """Train for the scheduled number of epochs, reporting per-epoch metrics."""
    mean, std = compute_normalization(instances)
    state.classifier.set_normalization(mean, std)
    history = []
    for _ in range(state.schedule.epochs):
        metrics = train_epoch(state, instances, step_callback=step_callback)
        history.append(metrics)
        if epoch_callback is not None:
            epoch_callback(state, metrics)
    return history


def train_blackbox(
    instances: Sequence,
    schedule: TrainSchedule,
    seed: int = 0,
    num_classes: int = 4,
    in_channels: int = 3,
    classifier_width: int = 20,
    epoch_callback=None,
) -> tuple[ClassifierNetwork, list[EpochMetrics]]:
    """Reference upper bound: the same classifier trained on unmasked images."""
    torch.manual_seed(seed)
    classifier = ClassifierNetwork(
        in_channels=in_channels, num_classes=num_classes, base_width=classifier_width
    )
    mean, std = compute_normalization(instances)
    classifier.set_normalization(mean, std)
    optimizer = torch.optim.Adam(
        classifier.parameters(),
        lr=schedule.learning_rate,
        betas=(schedule.adam_beta1, schedule.adam_beta2),
    )
    generator = torch.Generator().manual_seed(seed + 1)
    history = []
    classifier.train()
    total_steps = plan_total_steps(schedule, len(instances))
    step = 0
    for epoch in range(schedule.epochs):
        order = torch.randperm(len(instances), generator=generator).numpy()
        metrics = EpochMetrics()
        nll_sum, count = 0.0, 0
        for batch_index, start in enumerate(range(0, len(order), schedule.batch_size)):
            indices = order[start : start + schedule.batch_size]
            images, labels, _ = _prepare_batch(instances, indices)
            lr = effective_learning_rate(schedule, step, total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            ones = torch.ones(images.shape[0], *images.shape[-2:])
            probs = classifier(images, ones)
            nll = -torch.log(
                probs[torch.arange(len(indices)), labels].clamp(min=PROBABILITY_FLOOR)
            )
            loss = nll.mean()
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"non-finite blackbox loss in epoch {epoch}, batch {batch_index}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            nll_sum += float(nll.detach().sum())
            count += len(indices)
            metrics.batches += 1
        metrics.nll = nll_sum / max(count, 1)
        metrics.total = metrics.nll
        history.append(metrics)
        if epoch_callback is not None:
            epoch_callback(classifier, metrics)
    return classifier, history


def save_checkpoint(
    path,
    state: TrainState,
    config_hash: Optional[str] = None,
    metadata: Optional[dict] = None,
) -> None:
    """Atomic checkpoint write: both networks, optimizer, counters, seeds."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "selector_hparams": state.selector.hyperparameters(),
        "selector_state": state.selector.state_dict(),
        "classifier_hparams": state.classifier.hyperparameters(),
        "classifier_state": state.classifier.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "schedule": asdict(state.schedule),
        "generator_state": state.generator.get_state(),
        "seed": state.seed,
        "step": state.step,
        "epoch": state.epoch,
        "total_steps": state.total_steps,
        "config_hash": config_hash,
        "metadata": metadata or {},
    }
    path = os.fspath(path)
    fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            torch.save(payload, handle)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_checkpoint(path) -> tuple[TrainState, dict]:
    """Rebuild a TrainState from disk; returns (state, provenance info)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    schedule = TrainSchedule(**payload["schedule"])
    selector = SelectorNetwork(**payload["selector_hparams"])
    selector.load_state_dict(payload["selector_state"])
    classifier = ClassifierNetwork(**payload["classifier_hparams"])
    classifier.load_state_dict(payload["classifier_state"])
    optimizer = torch.optim.Adam(
        list(selector.parameters()) + list(classifier.parameters()),
        lr=schedule.learning_rate,
        betas=(schedule.adam_beta1, schedule.adam_beta2),
    )
    optimizer.load_state_dict(payload["optimizer_state"])
    generator = torch.Generator()
    generator.set_state(payload["generator_state"])
    state = TrainState(
        selector=selector,
        classifier=classifier,
        optimizer=optimizer,
        schedule=schedule,
        generator=generator,
        seed=payload["seed"],
        total_steps=payload["total_steps"],
        step=payload["step"],
        epoch=payload["epoch"],
    )
    info = {
        "config_hash": payload.get("config_hash"),
        "metadata": payload.get("metadata", {}),
    }
    return state, info


def save_blackbox(path, classifier: ClassifierNetwork, config_hash: Optional[str] = None) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "classifier_hparams": classifier.hyperparameters(),
        "classifier_state": classifier.state_dict(),
        "config_hash": config_hash,
    }
    path = os.fspath(path)
    fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            torch.save(payload, handle)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_blackbox(path) -> tuple[ClassifierNetwork, Optional[str]]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    classifier = ClassifierNetwork(**payload["classifier_hparams"])
    classifier.load_state_dict(payload["classifier_state"])
    return classifier, payload.get("config_hash")
