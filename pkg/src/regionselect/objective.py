"""Training objective: masked-prediction likelihood, budgeted sparsity
penalty, covariance regularization, and the schedules that drive them.

The sparsity penalty is thresholded: the size-weighted mean selection
probability p_bar is only penalized (by -log(1 - p_bar)) while it exceeds the
per-instance budget tau, so no hyperparameter search over penalty strengths is
needed to hit a target sparsity level.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from .regions import RegionPartition

PBAR_CLAMP = 1.0 - 1e-6
PROBABILITY_FLOOR = 1e-12


@dataclass
class TrainSchedule:
    """Hyperparameters of one training run.

    lambda1 stays at zero for the delay fraction of steps, ramps linearly to
    its full value over the warmup fraction, and is constant after. The
    relaxation temperature decays geometrically from temperature_start to
    temperature_end across the run.
    """

    lambda1: float = 10.0
    lambda2: float = 0.01
    tau_low: float = 0.05
    tau_high: float = 1.0
    temperature_start: float = 5.0
    temperature_end: float = 0.5
    sparsity_warmup_fraction: float = 0.3
    sparsity_delay_fraction: float = 0.2
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    learning_rate_end: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999

    def __post_init__(self):
        # a degenerate interval (tau_low == tau_high) pins the budget
        if not 0.0 < self.tau_low <= self.tau_high <= 1.0:
            raise ValueError(
                f"need 0 < tau_low <= tau_high <= 1, got [{self.tau_low}, {self.tau_high}]"
            )
        if self.temperature_end > self.temperature_start:
            raise ValueError("temperature_end must not exceed temperature_start")


@dataclass
class LossBreakdown:
    """Components of the training loss for one instance (or a batch mean)."""

    nll: torch.Tensor
    sparsity: torch.Tensor
    cov_penalty: torch.Tensor
    total: torch.Tensor
    p_bar: torch.Tensor

    def to_floats(self) -> dict:
        return {
            "nll": float(self.nll),
            "sparsity": float(self.sparsity),
            "cov_penalty": float(self.cov_penalty),
            "total": float(self.total),
            "p_bar": float(self.p_bar),
        }


def _as_float_tensor(value) -> torch.Tensor:
    tensor = torch.as_tensor(value)
    if not tensor.is_floating_point():
        tensor = tensor.to(torch.float64)
    return tensor


def expected_pixel_fraction(p, region_sizes, height: int, width: int) -> torch.Tensor:
    """Size-weighted mean selection probability: sum_j p_j |R_j| / (H W)."""
    p = _as_float_tensor(p)
    sizes = _as_float_tensor(region_sizes)
    total = height * width
    if abs(float(sizes.sum()) - total) > 0.5:
        raise ValueError(
            f"region sizes sum to {float(sizes.sum())}, expected {total}"
        )
    return (p * sizes).sum() / total


def sparsity_loss(p_bar, tau: float) -> torch.Tensor:
    """Budgeted penalty: -log(1 - p_bar) while p_bar exceeds tau, else zero.

    p_bar is clamped just below one so the penalty stays finite for saturated
    selections. The comparison is strict, so p_bar == tau is unpenalized.
    """
    p_bar = _as_float_tensor(p_bar)
    clamped = p_bar.clamp(max=PBAR_CLAMP)
    penalty = -torch.log1p(-clamped)
    return torch.where(p_bar > tau, penalty, torch.zeros_like(penalty))


def covariance_penalty(sigma) -> torch.Tensor:
    """Entrywise l1 norm of the covariance matrix."""
    return _as_float_tensor(sigma).abs().sum()


def negative_log_likelihood(class_probs, label: int) -> torch.Tensor:
    class_probs = _as_float_tensor(class_probs)
    if not 0 <= int(label) < class_probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {class_probs.shape[-1]} classes")
    return -torch.log(class_probs[..., int(label)].clamp(min=PROBABILITY_FLOOR))


def total_loss(
    class_probs,
    label: int,
    p,
    sigma,
    partition: RegionPartition,
    tau: float,
    schedule: TrainSchedule,
    lambda1: Optional[float] = None,
) -> LossBreakdown:
    """Full per-instance objective.

    total = nll + lambda1 * sparsity + lambda2 * |Sigma|_1. An annealed
    lambda1 may be passed to override the schedule's final value.
    """
    class_probs = _as_float_tensor(class_probs)
    if abs(float(class_probs.sum()) - 1.0) > 1e-5:
        raise ValueError("class_probs must sum to 1")
    h, w = partition.shape
    nll = negative_log_likelihood(class_probs, label)
    p_bar = expected_pixel_fraction(p, partition.region_sizes, h, w)
    sparsity = sparsity_loss(p_bar, tau)
    cov = covariance_penalty(sigma)
    weight = schedule.lambda1 if lambda1 is None else lambda1
    total = nll + weight * sparsity + schedule.lambda2 * cov
    return LossBreakdown(nll=nll, sparsity=sparsity, cov_penalty=cov, total=total, p_bar=p_bar)


def sample_tau(
    schedule: TrainSchedule,
    generator: Optional[torch.Generator] = None,
    n: int = 1,
) -> torch.Tensor:
    """Per-instance sparsity budgets, uniform on [tau_low, tau_high]."""
    draws = torch.rand(n, generator=generator)
    return schedule.tau_low + (schedule.tau_high - schedule.tau_low) * draws


def anneal(schedule: TrainSchedule, step: int, total_steps: int) -> tuple[float, float]:
    """Effective (lambda1, temperature) at a training step.

    lambda1 ramps linearly from 0 to its final value over the warmup fraction
    of steps and stays constant after; an optional delay fraction holds it at
    zero first so an untrained classifier can find its footing before the
    budget starts closing regions. The temperature decays geometrically from
    start to end across all steps.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    delay_steps = schedule.sparsity_delay_fraction * total_steps
    warmup_steps = schedule.sparsity_warmup_fraction * total_steps
    if warmup_steps > 0:
        ramp = min(1.0, max(0.0, step - delay_steps) / warmup_steps)
    else:
        ramp = 0.0 if step < delay_steps else 1.0
    progress = step / total_steps if total_steps > 0 else 1.0
    ratio = schedule.temperature_end / schedule.temperature_start
    temperature = schedule.temperature_start * ratio**progress
    return schedule.lambda1 * ramp, temperature


def effective_learning_rate(schedule: TrainSchedule, step: int, total_steps: int) -> float:
    """Geometric decay from learning_rate to learning_rate_end across the run.

    Keeps the late low-temperature phase stable: straight-through gradients
    grow as the relaxation sharpens, so the step size shrinks in tandem.
    """
    progress = step / total_steps if total_steps > 0 else 1.0
    ratio = schedule.learning_rate_end / schedule.learning_rate
    return schedule.learning_rate * ratio**progress


@dataclass
class EpochMetrics:
    """Running means of the loss components across one epoch."""

    nll: float = 0.0
    sparsity: float = 0.0
    cov_penalty: float = 0.0
    total: float = 0.0
    p_bar: float = 0.0
    lambda1: float = 0.0
    temperature: float = 0.0
    batches: int = 0
    extras: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        record = {
            "nll": self.nll,
            "sparsity": self.sparsity,
            "cov_penalty": self.cov_penalty,
            "total": self.total,
            "p_bar": self.p_bar,
            "lambda1": self.lambda1,
            "temperature": self.temperature,
            "batches": self.batches,
        }
        record.update(self.extras)
        return record


def batch_sparsity_terms(
    p: torch.Tensor,
    region_sizes: torch.Tensor,
    instance_ids: torch.Tensor,
    taus: torch.Tensor,
    batch_size: int,
    pixels_per_image: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Vectorized per-instance (p_bar, sparsity penalty) over a packed batch."""
    weighted = p * region_sizes
    p_bar = weighted.new_zeros(batch_size)
    p_bar.index_add_(0, instance_ids, weighted)
    p_bar = p_bar / pixels_per_image
    clamped = p_bar.clamp(max=PBAR_CLAMP)
    penalty = -torch.log1p(-clamped)
    sparsity = torch.where(p_bar > taus, penalty, torch.zeros_like(penalty))
    return p_bar, sparsity
