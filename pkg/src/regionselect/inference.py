"""Budget search at inference: raise the sparsity budget stepwise until the
classifier is certain enough, then read the prediction from that stopping
point only.

The search never looks at which class is predicted while probing, only at the
top-class probability; with no qualifying budget it falls back to the full
image (budget 1.0) and flags the explanation. Inference is fully
deterministic: probabilities collapse to logistic(mu) and masks are
thresholded rather than sampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .batching import pack_partitions
from .classifier import ClassifierNetwork
from .regions import RegionPartition, broadcast_to_pixels
from .selector import (
    LOGIT_CLAMP,
    SelectorNetwork,
    aggregate_distribution_parameters,
    apply_mask,
    build_distribution,
    ensure_eval_mode,
    thresholded_mask,
)


def default_tau_grid(step: float = 0.05) -> tuple[float, ...]:
    count = int(round(1.0 / step))
    return tuple(round(i * step, 10) for i in range(1, count + 1))


@dataclass(frozen=True)
class ThresholdPolicy:
    """How to pick the per-instance sparsity budget.

    delta is the certainty the search must reach; tau_grid the ascending
    budgets it may try (the last must be 1.0 so the fallback is the full
    image); cutoff the probability threshold that binarizes the mask.
    """

    delta: float = 0.99
    tau_grid: tuple[float, ...] = field(default_factory=default_tau_grid)
    cutoff: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        grid = tuple(float(t) for t in self.tau_grid)
        if len(grid) == 0 or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("tau grid must be strictly ascending")
        if grid[0] <= 0.0 or grid[-1] != 1.0:
            raise ValueError("tau grid must lie in (0, 1] and end at 1.0")
        object.__setattr__(self, "tau_grid", grid)
        if not 0.0 < self.cutoff < 1.0:
            raise ValueError(f"cutoff must lie in (0, 1), got {self.cutoff}")


@dataclass
class ProbeRecord:
    """Outcome of evaluating one candidate budget."""

    tau: float
    certainty: float
    realized_fraction: float
    expected_fraction: float
    class_probs: np.ndarray
    probabilities: np.ndarray
    hard: np.ndarray


@dataclass
class Explanation:
    """A prediction together with the mask that produced it."""

    chosen_tau: float
    certainty: float
    predicted_class: int
    class_probs: np.ndarray
    region_importance: np.ndarray
    partition: RegionPartition
    x_m: np.ndarray
    pixel_mask: np.ndarray
    embedding_colors: np.ndarray
    realized_fraction: float
    expected_fraction: float
    reached_target: bool
    probes: list[ProbeRecord] = field(default_factory=list)

    @property
    def importance(self) -> np.ndarray:
        """Pixel-level importance: each pixel inherits its region's probability."""
        return broadcast_to_pixels(self.region_importance, self.partition)

    def to_record(self) -> dict:
        return {
            "chosen_tau": self.chosen_tau,
            "certainty": self.certainty,
            "region_count": self.partition.region_count,
            "predicted_class": self.predicted_class,
            "class_probs": [float(v) for v in self.class_probs],
            "region_importance": [float(v) for v in self.region_importance],
            "realized_fraction": self.realized_fraction,
            "expected_fraction": self.expected_fraction,
            "reached_target": self.reached_target,
            "probed_taus": [probe.tau for probe in self.probes],
            "probed_certainties": [probe.certainty for probe in self.probes],
            "probed_fractions": [probe.realized_fraction for probe in self.probes],
        }


def first_qualifying_index(certainties: Sequence[float], delta: float) -> Optional[int]:
    """Index of the first certainty reaching delta, None if unattained."""
    for i, certainty in enumerate(certainties):
        if certainty >= delta:
            return i
    return None


def _probe_single(
    selector: SelectorNetwork,
    classifier: ClassifierNetwork,
    image,
    partition: RegionPartition,
    tau: float,
    cutoff: float,
):
    ensure_eval_mode(selector, classifier)
    with torch.no_grad():
        dist = build_distribution(selector, image, partition, tau)
        mask = thresholded_mask(dist, cutoff)
        masked = apply_mask(image, mask)
        probs = classifier(masked.x_m.unsqueeze(0), masked.pixel_mask.unsqueeze(0))[0]
    probs_np = probs.numpy().astype(np.float64)
    p_np = mask.probabilities.numpy().astype(np.float64)
    hard_np = mask.hard.numpy() > 0.5
    sizes = partition.region_sizes
    pixels = float(partition.labels.size)
    record = ProbeRecord(
        tau=float(tau),
        certainty=float(probs_np.max()),
        realized_fraction=float(sizes[hard_np].sum() / pixels),
        expected_fraction=float((p_np * sizes).sum() / pixels),
        class_probs=probs_np,
        probabilities=p_np,
        hard=hard_np,
    )
    return record, dist, masked


def _embedding_colors(dist) -> np.ndarray:
    """Raw 3-channel pixel map of the region embeddings (first dims, zero-padded)."""
    emb = dist.embeddings.detach().numpy().astype(np.float64)
    d, k = emb.shape
    channels = np.zeros((d, 3))
    channels[:, : min(3, k)] = emb[:, :3]
    return np.stack(
        [broadcast_to_pixels(channels[:, c], dist.partition) for c in range(3)], axis=-1
    )


def _explanation_from(record: ProbeRecord, dist, masked, reached: bool) -> Explanation:
    return Explanation(
        chosen_tau=record.tau,
        certainty=record.certainty,
        predicted_class=int(record.class_probs.argmax()),
        class_probs=record.class_probs,
        region_importance=record.probabilities,
        partition=dist.partition,
        x_m=masked.x_m.numpy(),
        pixel_mask=masked.pixel_mask.numpy() > 0.5,
        embedding_colors=_embedding_colors(dist),
        realized_fraction=record.realized_fraction,
        expected_fraction=record.expected_fraction,
        reached_target=reached,
    )


def dynamic_threshold(
    selector: SelectorNetwork,
    classifier: ClassifierNetwork,
    image,
    partition: RegionPartition,
    policy: ThresholdPolicy,
) -> Explanation:
    """Search the budget grid upward until the certainty target is met.

    Returns the explanation of the stopping budget; if no budget qualifies the
    full-image result (budget 1.0) is returned with reached_target=False.
    """
    probes: list[ProbeRecord] = []
    for tau in policy.tau_grid:
        record, dist, masked = _probe_single(
            selector, classifier, image, partition, tau, policy.cutoff
        )
        probes.append(record)
        if record.certainty >= policy.delta:
            explanation = _explanation_from(record, dist, masked, reached=True)
            explanation.probes = probes
            return explanation
    explanation = _explanation_from(record, dist, masked, reached=False)
    explanation.probes = probes
    return explanation


def predict_fixed(
    selector: SelectorNetwork,
    classifier: ClassifierNetwork,
    image,
    partition: RegionPartition,
    tau: float,
    cutoff: float = 0.5,
) -> Explanation:
    """Single-budget prediction; certainty is reported but not required."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    record, dist, masked = _probe_single(selector, classifier, image, partition, tau, cutoff)
    explanation = _explanation_from(record, dist, masked, reached=True)
    explanation.probes = [record]
    return explanation


def batched_fixed_pass(
    selector: SelectorNetwork,
    classifier: ClassifierNetwork,
    instances: Sequence,
    tau: float,
    cutoff: float = 0.5,
    batch_size: int = 128,
) -> list[ProbeRecord]:
    """One deterministic pass over many instances at a shared budget."""
    records: list[ProbeRecord] = []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start : start + batch_size]
        records.extend(_probe_batch(selector, classifier, chunk, tau, cutoff))
    return records


def _probe_batch(
    selector: SelectorNetwork,
    classifier: ClassifierNetwork,
    instances: Sequence,
    tau: float,
    cutoff: float,
    keep_embeddings: bool = False,
):
    """Batched version of the single-budget probe; semantics are identical."""
    ensure_eval_mode(selector, classifier)
    images = torch.from_numpy(
        np.stack([np.asarray(inst.image, dtype=np.float32) for inst in instances])
    )
    packed = pack_partitions([inst.partition for inst in instances])
    b = images.shape[0]
    h, w = packed.image_shape
    with torch.no_grad():
        taus = torch.full((b,), float(tau))
        mu, embeddings = aggregate_distribution_parameters(selector, images, taus, packed)
        p = torch.sigmoid(mu.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
        hard = (p > cutoff).to(p.dtype)
        pixel_mask = hard[packed.flat_index].view(b, h, w)
        x_m = images * pixel_mask.unsqueeze(1)
        probs = classifier(x_m, pixel_mask)

    records = []
    extras = []
    for i in range(b):
        sl = packed.instance_slice(i)
        p_np = p[sl].numpy().astype(np.float64)
        hard_np = hard[sl].numpy() > 0.5
        sizes = instances[i].partition.region_sizes
        pixels = float(h * w)
        probs_np = probs[i].numpy().astype(np.float64)
        records.append(
            ProbeRecord(
                tau=float(tau),
                certainty=float(probs_np.max()),
                realized_fraction=float(sizes[hard_np].sum() / pixels),
                expected_fraction=float((p_np * sizes).sum() / pixels),
                class_probs=probs_np,
                probabilities=p_np,
                hard=hard_np,
            )
        )
        if keep_embeddings:
            extras.append(
                (embeddings[sl].numpy().astype(np.float64), x_m[i].numpy(), pixel_mask[i].numpy() > 0.5)
            )
    if keep_embeddings:
        return records, extras
    return records


@dataclass
class SearchOutcome:
    """Per-instance probe trail from a batched budget search."""

    probes: list[ProbeRecord]
    stop_index: int
    reached_target: bool
    embeddings: Optional[np.ndarray] = None
    x_m: Optional[np.ndarray] = None
    pixel_mask: Optional[np.ndarray] = None

    def stop_for_delta(self, delta: float) -> tuple[int, bool]:
        """Stopping probe index for a (possibly smaller) certainty target."""
        idx = first_qualifying_index([p.certainty for p in self.probes], delta)
        if idx is None:
            return len(self.probes) - 1, False
        return idx, True


def search_batched(
    selector: SelectorNetwork,
    classifier: ClassifierNetwork,
    instances: Sequence,
    policy: ThresholdPolicy,
    batch_size: int = 128,
) -> list[SearchOutcome]:
    """Dynamic search over many instances, vectorized across instances.

    Each instance still walks the budget grid in ascending order and stops at
    its first qualifying budget, exactly as the single-instance search; only
    the classifier/selector evaluations are shared. Probe trails are kept so
    smaller certainty targets can be answered without re-running.
    """
    n = len(instances)
    trails: list[list[ProbeRecord]] = [[] for _ in range(n)]
    finals: list[Optional[tuple]] = [None] * n
    unresolved = list(range(n))

    for grid_pos, tau in enumerate(policy.tau_grid):
        if not unresolved:
            break
        still = []
        for start in range(0, len(unresolved), batch_size):
            chunk_ids = unresolved[start : start + batch_size]
            records, extras = _probe_batch(
                selector,
                classifier,
                [instances[i] for i in chunk_ids],
                tau,
                policy.cutoff,
                keep_embeddings=True,
            )
            for i, record, extra in zip(chunk_ids, records, extras):
                trails[i].append(record)
                last_grid_point = grid_pos == len(policy.tau_grid) - 1
                if record.certainty >= policy.delta or last_grid_point:
                    finals[i] = (record.certainty >= policy.delta, extra)
                else:
                    still.append(i)
        unresolved = sorted(still)

    outcomes = []
    for i in range(n):
        reached, extra = finals[i]
        embeddings, x_m, pixel_mask = extra
        outcomes.append(
            SearchOutcome(
                probes=trails[i],
                stop_index=len(trails[i]) - 1,
                reached_target=reached,
                embeddings=embeddings,
                x_m=x_m,
                pixel_mask=pixel_mask,
            )
        )
    return outcomes


def explanation_from_outcome(
    outcome: SearchOutcome, partition: RegionPartition
) -> Explanation:
    """Materialize the stopping-point explanation of a batched search."""
    record = outcome.probes[outcome.stop_index]
    d, k = outcome.embeddings.shape
    channels = np.zeros((d, 3))
    channels[:, : min(3, k)] = outcome.embeddings[:, :3]
    colors = np.stack(
        [broadcast_to_pixels(channels[:, c], partition) for c in range(3)], axis=-1
    )
    return Explanation(
        chosen_tau=record.tau,
        certainty=record.certainty,
        predicted_class=int(record.class_probs.argmax()),
        class_probs=record.class_probs,
        region_importance=record.probabilities,
        partition=partition,
        x_m=outcome.x_m,
        pixel_mask=outcome.pixel_mask,
        embedding_colors=colors,
        realized_fraction=record.realized_fraction,
        expected_fraction=record.expected_fraction,
        reached_target=outcome.reached_target,
        probes=outcome.probes,
    )
