"""Metric battery: accuracy, localization overlap, insertion/deletion
fidelity, simple mask baselines, and the full evaluation report.

Fidelity probes reveal or remove pixels of the explained masked image in
importance order, and measure how often the classifier still returns the
prediction it made on the full masked image. Pixel ranking is deterministic:
ties inside equal-importance regions break in row-major order.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .classifier import ClassifierNetwork, TrainState
from .exceptions import ConfigError
from .inference import (
    Explanation,
    SearchOutcome,
    ThresholdPolicy,
    batched_fixed_pass,
    explanation_from_outcome,
    search_batched,
)
from .regions import RegionPartition, broadcast_to_pixels
from .selector import RegionMask, ensure_eval_mode

REPORT_SCHEMA_VERSION = 1


@dataclass
class FidelityCurve:
    """Share of instances keeping their original prediction per pixel fraction."""

    fractions: np.ndarray
    fidelity: np.ndarray
    std: np.ndarray

    def at_fraction(self, f: float) -> float:
        """Linear interpolation of the curve at an arbitrary fraction."""
        return float(np.interp(f, self.fractions, self.fidelity))


def localization(mask_pixels: np.ndarray, m_star: np.ndarray) -> float:
    """Fraction of selected pixels lying inside the object: |m & m*| / |m|."""
    mask_pixels = np.asarray(mask_pixels).astype(bool)
    m_star = np.asarray(m_star).astype(bool)
    if not m_star.any():
        raise ValueError("ground-truth mask has no active pixels")
    selected = int(mask_pixels.sum())
    if selected == 0:
        return 0.0
    return float((mask_pixels & m_star).sum() / selected)


def pixel_importance(explanation) -> np.ndarray:
    """Pixel-level importance map of an explanation.

    Region-based explanations spread each region's selection probability over
    its pixels; pixel-based baselines carry their own importance map.
    """
    importance = getattr(explanation, "importance", None)
    if importance is not None:
        return np.asarray(importance, dtype=np.float64)
    return broadcast_to_pixels(
        np.asarray(explanation.region_importance, dtype=np.float64),
        explanation.partition,
    )


def importance_rank_order(importance: np.ndarray) -> np.ndarray:
    """Flat pixel indices sorted by descending importance, row-major on ties."""
    return np.argsort(-np.asarray(importance, dtype=np.float64).ravel(), kind="stable")


def _reveal_count(fraction: float, n_pixels: int) -> int:
    return int(np.floor(fraction * n_pixels + 0.5))


@dataclass
class PixelExplanation:
    """Explanation defined directly on pixels (used by the lattice baseline)."""

    x_m: np.ndarray
    pixel_mask: np.ndarray
    predicted_class: int
    class_probs: np.ndarray
    importance: np.ndarray


def _probe_probs(
    classifier: ClassifierNetwork,
    images: np.ndarray,
    masks: np.ndarray,
    batch_size: int = 128,
) -> np.ndarray:
    ensure_eval_mode(classifier)
    outputs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = torch.from_numpy(images[start : start + batch_size])
            m = torch.from_numpy(masks[start : start + batch_size].astype(np.float32))
            outputs.append(classifier(x, m).numpy())
    return np.concatenate(outputs, axis=0)


def _fidelity_matches(
    classifier: ClassifierNetwork,
    explanations: Sequence,
    fractions: np.ndarray,
    mode: str,
    batch_size: int,
) -> np.ndarray:
    """Boolean match matrix [n_instances, n_fractions] for insertion/deletion."""
    orders = []
    actives = []
    x_ms = []
    predictions = []
    for expl in explanations:
        orders.append(importance_rank_order(pixel_importance(expl)))
        actives.append(np.asarray(expl.pixel_mask, dtype=bool).ravel())
        x_ms.append(np.asarray(expl.x_m, dtype=np.float32))
        predictions.append(int(expl.predicted_class))

    n = len(explanations)
    matches = np.zeros((n, fractions.shape[0]), dtype=bool)
    for j, fraction in enumerate(fractions):
        probe_images = np.empty((n,) + x_ms[0].shape, dtype=np.float32)
        probe_masks = np.empty((n,) + actives[0].shape, dtype=bool)
        for i in range(n):
            n_pixels = actives[i].shape[0]
            reveal = float(fraction) if mode == "insertion" else 1.0 - float(fraction)
            k = _reveal_count(reveal, n_pixels)
            top = np.zeros(n_pixels, dtype=bool)
            top[orders[i][:k]] = True
            keep = actives[i] & top
            probe_masks[i] = keep
            shaped = keep.reshape(x_ms[i].shape[-2:])
            probe_images[i] = x_ms[i] * shaped
        probs = _probe_probs(
            classifier,
            probe_images,
            probe_masks.reshape((n,) + x_ms[0].shape[-2:]),
            batch_size,
        )
        matches[:, j] = probs.argmax(axis=1) == np.array(predictions)
    return matches


def _fraction_grid(steps: int, fractions) -> np.ndarray:
    if fractions is not None:
        return np.asarray(fractions, dtype=np.float64)
    if steps < 2:
        raise ValueError("need at least 2 fidelity steps")
    return np.arange(steps) / (steps - 1)


def insertion_fidelity(
    classifier: ClassifierNetwork,
    explanations: Sequence,
    steps: int = 21,
    fractions=None,
    batch_size: int = 128,
) -> FidelityCurve:
    """Reveal the top-f fraction of pixels (others black) and re-classify.

    At f = 1 the probe equals the explained masked image, so fidelity is
    exactly 1. Reveal counts are floor(f * H * W + 0.5).
    """
    grid = _fraction_grid(steps, fractions)
    matches = _fidelity_matches(classifier, explanations, grid, "insertion", batch_size)
    return FidelityCurve(
        fractions=grid,
        fidelity=matches.mean(axis=0),
        std=matches.std(axis=0),
    )


def deletion_fidelity(
    classifier: ClassifierNetwork,
    explanations: Sequence,
    steps: int = 21,
    fractions=None,
    batch_size: int = 128,
) -> FidelityCurve:
    """Black out an f-fraction of pixels and re-classify.

    The probe at fraction f retains exactly the top (1 - f) fraction of
    pixels, so it is pixel-identical to the insertion probe at 1 - f and the
    two curves are exact complements. At f = 0 the probe is the unmodified
    masked image, so fidelity is exactly 1.
    """
    grid = _fraction_grid(steps, fractions)
    matches = _fidelity_matches(classifier, explanations, grid, "deletion", batch_size)
    return FidelityCurve(
        fractions=grid,
        fidelity=matches.mean(axis=0),
        std=matches.std(axis=0),
    )


def _bayer_matrix(size: int) -> np.ndarray:
    matrix = np.zeros((1, 1), dtype=np.int64)
    current = 1
    while current < size:
        matrix = np.block(
            [[4 * matrix, 4 * matrix + 2], [4 * matrix + 3, 4 * matrix + 1]]
        )
        current *= 2
    return matrix


def stratified_rank(height: int, width: int) -> np.ndarray:
    """Total order over pixels where every prefix forms an even lattice."""
    size = 1
    while size < max(height, width):
        size *= 2
    values = _bayer_matrix(size)[:height, :width]
    order = np.argsort(values.ravel(), kind="stable")
    ranks = np.empty(height * width, dtype=np.int64)
    ranks[order] = np.arange(height * width)
    return ranks.reshape(height, width)


def evenly_spaced_mask(height: int, width: int, tau: float) -> np.ndarray:
    """Deterministic lattice keeping the ceil(tau * H * W) best-spread pixels."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    k = int(np.ceil(tau * height * width))
    return stratified_rank(height, width) < k


def random_region_mask(
    partition: RegionPartition, tau: float, rng: np.random.Generator
) -> RegionMask:
    """Budgeted random baseline: shuffle regions, add until the next would
    overrun tau * H * W pixels."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    budget = tau * partition.labels.size
    chosen = np.zeros(partition.region_count, dtype=bool)
    used = 0
    for j in rng.permutation(partition.region_count):
        if used + partition.region_sizes[j] > budget:
            break
        chosen[j] = True
        used += int(partition.region_sizes[j])
    hard = torch.from_numpy(chosen.astype(np.float32))
    return RegionMask(probabilities=hard.clone(), hard=hard, partition=partition)


def evenly_spaced_explanations(
    classifier: ClassifierNetwork,
    instances: Sequence,
    taus: Sequence[float],
    batch_size: int = 128,
) -> list[PixelExplanation]:
    """Lattice-mask counterpart explanations at per-instance budgets.

    The mask ignores content entirely; importance is the lattice rank itself,
    so insertion reveals an evenly growing sub-lattice.
    """
    images = np.stack([np.asarray(inst.image, dtype=np.float32) for inst in instances])
    _, _, h, w = images.shape
    ranks = stratified_rank(h, w)
    importance_base = (h * w - ranks).astype(np.float64) / (h * w)
    masks = np.stack([evenly_spaced_mask(h, w, float(t)) for t in taus])
    masked = images * masks[:, None, :, :].astype(np.float32)
    probs = _probe_probs(classifier, masked, masks, batch_size)
    return [
        PixelExplanation(
            x_m=masked[i],
            pixel_mask=masks[i],
            predicted_class=int(probs[i].argmax()),
            class_probs=probs[i].astype(np.float64),
            importance=importance_base,
        )
        for i in range(len(instances))
    ]


def classifier_accuracy(
    classifier: ClassifierNetwork, instances: Sequence, batch_size: int = 128
) -> float:
    """Plain accuracy on unmasked images."""
    images = np.stack([np.asarray(inst.image, dtype=np.float32) for inst in instances])
    ones = np.ones((images.shape[0],) + images.shape[-2:], dtype=bool)
    probs = _probe_probs(classifier, images, ones, batch_size)
    labels = np.array([int(inst.label) for inst in instances])
    return float((probs.argmax(axis=1) == labels).mean())


@dataclass
class EvalReport:
    """Aggregated evaluation of one checkpoint on one dataset."""

    schema_version: int
    seed: int
    delta: float
    num_instances: int
    accuracy: float
    mean_localization: float
    mean_chosen_tau: float
    mean_realized_fraction: float
    mean_expected_fraction: float
    fallback_rate: float
    object_area_fraction: float
    random_localization: Optional[float] = None
    blackbox_accuracy: Optional[float] = None
    delta_sweep: list = field(default_factory=list)
    fixed_tau_results: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    config_hash: Optional[str] = None

    def to_json_dict(self) -> dict:
        payload = {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "delta": self.delta,
            "num_instances": self.num_instances,
            "accuracy": self.accuracy,
            "mean_localization": self.mean_localization,
            "mean_chosen_tau": self.mean_chosen_tau,
            "mean_realized_fraction": self.mean_realized_fraction,
            "mean_expected_fraction": self.mean_expected_fraction,
            "fallback_rate": self.fallback_rate,
            "object_area_fraction": self.object_area_fraction,
            "random_localization": self.random_localization,
            "blackbox_accuracy": self.blackbox_accuracy,
            "delta_sweep": self.delta_sweep,
            "fixed_tau_results": self.fixed_tau_results,
            "config_hash": self.config_hash,
            "curves": {
                name: {
                    "fractions": [float(v) for v in curve.fractions],
                    "fidelity": [float(v) for v in curve.fidelity],
                    "std": [float(v) for v in curve.std],
                }
                for name, curve in self.curves.items()
            },
        }
        return payload


def _sweep_row(
    outcomes: Sequence[SearchOutcome],
    instances: Sequence,
    delta: float,
) -> dict:
    predictions, localizations, taus = [], [], []
    expected, realized, fallbacks = [], [], 0
    for outcome, inst in zip(outcomes, instances):
        idx, reached = outcome.stop_for_delta(delta)
        record = outcome.probes[idx]
        predictions.append(int(record.class_probs.argmax()) == int(inst.label))
        pixels = broadcast_to_pixels(record.hard.astype(np.float64), inst.partition) > 0.5
        localizations.append(localization(pixels, inst.m_star))
        taus.append(record.tau)
        expected.append(record.expected_fraction)
        realized.append(record.realized_fraction)
        fallbacks += 0 if reached else 1
    return {
        "delta": float(delta),
        "accuracy": float(np.mean(predictions)),
        "localization": float(np.mean(localizations)),
        "mean_p_bar": float(np.mean(expected)),
        "mean_realized_fraction": float(np.mean(realized)),
        "mean_chosen_tau": float(np.mean(taus)),
        "fallback_rate": fallbacks / max(len(instances), 1),
    }


def _fixed_row(
    state: TrainState, instances: Sequence, tau: float, label: str, cutoff: float
) -> dict:
    records = batched_fixed_pass(
        state.selector, state.classifier, instances, tau, cutoff
    )
    correct, localizations, realized = [], [], []
    for record, inst in zip(records, instances):
        correct.append(int(record.class_probs.argmax()) == int(inst.label))
        pixels = broadcast_to_pixels(record.hard.astype(np.float64), inst.partition) > 0.5
        localizations.append(localization(pixels, inst.m_star))
        realized.append(record.realized_fraction)
    return {
        "mode": label,
        "tau": float(tau),
        "accuracy": float(np.mean(correct)),
        "localization": float(np.mean(localizations)),
        "mean_realized_fraction": float(np.mean(realized)),
    }


def evaluate(
    state: TrainState,
    instances: Sequence,
    policy: ThresholdPolicy,
    seed: int = 0,
    delta_sweep: Sequence[float] = (),
    fixed_taus: Sequence[float] = (),
    matched: bool = False,
    half_matched: bool = False,
    with_fidelity: bool = True,
    batch_size: int = 128,
    config_hash: Optional[str] = None,
) -> EvalReport:
    """Full evaluation: dynamic search, metrics, baselines, ablations.

    Deterministic given the seed; the seed only drives the random-region
    baseline since the inference path itself never samples.
    """
    num_classes = state.classifier.num_classes
    labels_seen = {int(inst.label) for inst in instances}
    if labels_seen and max(labels_seen) >= num_classes:
        raise ConfigError(
            f"dataset labels go up to {max(labels_seen)} but the classifier has "
            f"{num_classes} classes"
        )
    deltas_needed = [policy.delta, *delta_sweep]
    search_policy = ThresholdPolicy(
        delta=max(deltas_needed), tau_grid=policy.tau_grid, cutoff=policy.cutoff
    )
    outcomes = search_batched(
        state.selector, state.classifier, instances, search_policy, batch_size
    )

    explanations: list[Explanation] = []
    for outcome, inst in zip(outcomes, instances):
        idx, reached = outcome.stop_for_delta(policy.delta)
        if idx == outcome.stop_index:
            expl = explanation_from_outcome(outcome, inst.partition)
            expl.reached_target = reached
            explanations.append(expl)
        else:
            trimmed = SearchOutcome(
                probes=outcome.probes[: idx + 1],
                stop_index=idx,
                reached_target=reached,
                embeddings=outcome.embeddings,
                x_m=None,
                pixel_mask=None,
            )
            explanations.append(_rebuild_explanation(state, trimmed, inst, policy.cutoff))

    labels = np.array([int(inst.label) for inst in instances])
    predictions = np.array([e.predicted_class for e in explanations])
    localizations = np.array(
        [localization(e.pixel_mask, inst.m_star) for e, inst in zip(explanations, instances)]
    )
    area_fractions = np.array(
        [inst.m_star.sum() / inst.m_star.size for inst in instances]
    )

    rng = np.random.default_rng(seed)
    random_localizations = []
    for expl, inst in zip(explanations, instances):
        mask = random_region_mask(inst.partition, expl.chosen_tau, rng)
        pixels = broadcast_to_pixels(mask.hard.numpy().astype(np.float64), inst.partition) > 0.5
        random_localizations.append(localization(pixels, inst.m_star))

    report = EvalReport(
        schema_version=REPORT_SCHEMA_VERSION,
        seed=seed,
        delta=policy.delta,
        num_instances=len(instances),
        accuracy=float((predictions == labels).mean()),
        mean_localization=float(localizations.mean()),
        mean_chosen_tau=float(np.mean([e.chosen_tau for e in explanations])),
        mean_realized_fraction=float(np.mean([e.realized_fraction for e in explanations])),
        mean_expected_fraction=float(np.mean([e.expected_fraction for e in explanations])),
        fallback_rate=float(np.mean([not e.reached_target for e in explanations])),
        object_area_fraction=float(area_fractions.mean()),
        random_localization=float(np.mean(random_localizations)),
        config_hash=config_hash,
    )

    for delta in delta_sweep:
        report.delta_sweep.append(_sweep_row(outcomes, instances, delta))

    fixed_requests = [(float(t), f"fixed_{t:g}") for t in fixed_taus]
    if matched:
        fixed_requests.append((report.mean_chosen_tau, "matched"))
    if half_matched:
        fixed_requests.append((report.mean_chosen_tau / 2.0, "half_matched"))
    for tau, label in fixed_requests:
        report.fixed_tau_results.append(
            _fixed_row(state, instances, tau, label, policy.cutoff)
        )

    if with_fidelity:
        report.curves["dynamic_insertion"] = insertion_fidelity(
            state.classifier, explanations, batch_size=batch_size
        )
        report.curves["dynamic_deletion"] = deletion_fidelity(
            state.classifier, explanations, batch_size=batch_size
        )
        baseline = evenly_spaced_explanations(
            state.classifier,
            instances,
            [e.chosen_tau for e in explanations],
            batch_size,
        )
        report.curves["evenly_spaced_insertion"] = insertion_fidelity(
            state.classifier, baseline, batch_size=batch_size
        )
        report.curves["evenly_spaced_deletion"] = deletion_fidelity(
            state.classifier, baseline, batch_size=batch_size
        )
    return report


def _rebuild_explanation(
    state: TrainState, outcome: SearchOutcome, inst, cutoff: float
) -> Explanation:
    """Re-materialize x_m and embeddings at an earlier stopping point."""
    from .inference import _probe_batch

    records, extras = _probe_batch(
        state.selector,
        state.classifier,
        [inst],
        outcome.probes[outcome.stop_index].tau,
        cutoff,
        keep_embeddings=True,
    )
    embeddings, x_m, pixel_mask = extras[0]
    outcome.embeddings = embeddings
    outcome.x_m = x_m
    outcome.pixel_mask = pixel_mask
    return explanation_from_outcome(outcome, inst.partition)


def write_report(report: EvalReport, path) -> None:
    """Atomic JSON dump of the report."""
    path = os.fspath(path)
    payload = json.dumps(report.to_json_dict(), indent=2, sort_keys=True)
    fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def write_curves_csv(report: EvalReport, out_dir) -> list[str]:
    """One CSV per fidelity curve: fraction, fidelity, std."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name, curve in sorted(report.curves.items()):
        path = os.path.join(os.fspath(out_dir), f"{name}.csv")
        fd, tmp_path = tempfile.mkstemp(dir=os.fspath(out_dir), suffix=".tmp")
        with os.fdopen(fd, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["fraction", "fidelity", "std"])
            for f, v, s in zip(curve.fractions, curve.fidelity, curve.std):
                writer.writerow([f"{f:.6f}", f"{v:.6f}", f"{s:.6f}"])
        os.replace(tmp_path, path)
        written.append(path)
    return written
