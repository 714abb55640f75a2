"""Packing of variable-region partitions into flat tensors for batched work.

Region counts differ per instance, so batches concatenate all regions into one
axis. Every region gets a global index (instance offset + local label) and the
pixel-to-region map is flattened accordingly; aggregation then becomes a single
index_add over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .regions import RegionPartition


@dataclass
class PackedPartitions:
    """Flattened view of a batch of partitions.

    flat_index: [B*H*W] global region index of every pixel
    region_sizes: [R] pixel counts, all instances concatenated
    instance_ids: [R] owning instance of each region
    offsets: [B+1] region-index offsets, instance b owns [offsets[b], offsets[b+1])
    label_maps: [B, H, W] local labels
    """

    flat_index: torch.Tensor
    region_sizes: torch.Tensor
    instance_ids: torch.Tensor
    offsets: np.ndarray
    label_maps: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.label_maps.shape[0]

    @property
    def total_regions(self) -> int:
        return int(self.region_sizes.shape[0])

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.label_maps.shape[1], self.label_maps.shape[2]

    def instance_slice(self, b: int) -> slice:
        return slice(int(self.offsets[b]), int(self.offsets[b + 1]))


def pack_partitions(partitions: Sequence[RegionPartition]) -> PackedPartitions:
    counts = np.array([p.region_count for p in partitions], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    label_maps = torch.from_numpy(
        np.stack([p.labels.astype(np.int64) for p in partitions])
    )
    shifted = label_maps + torch.from_numpy(offsets[:-1]).view(-1, 1, 1)
    sizes = torch.from_numpy(
        np.concatenate([p.region_sizes for p in partitions]).astype(np.float32)
    )
    instance_ids = torch.from_numpy(np.repeat(np.arange(len(partitions)), counts))
    return PackedPartitions(
        flat_index=shifted.reshape(-1),
        region_sizes=sizes,
        instance_ids=instance_ids,
        offsets=offsets,
        label_maps=label_maps,
    )


def region_mean(values: torch.Tensor, packed: PackedPartitions) -> torch.Tensor:
    """Differentiable per-region mean of dense maps.

    values: [B, C, H, W] -> [R, C] where R is the packed region total.
    """
    b, c, h, w = values.shape
    flat = values.permute(0, 2, 3, 1).reshape(b * h * w, c)
    sums = flat.new_zeros((packed.total_regions, c))
    sums.index_add_(0, packed.flat_index, flat)
    return sums / packed.region_sizes.unsqueeze(1)


def broadcast_regions(values: torch.Tensor, packed: PackedPartitions) -> torch.Tensor:
    """Expand per-region values [R] to pixel maps [B, H, W]."""
    h, w = packed.image_shape
    return values[packed.flat_index].view(packed.batch_size, h, w)


def per_instance_sum(values: torch.Tensor, packed: PackedPartitions) -> torch.Tensor:
    """Sum per-region values [R] within each instance -> [B]."""
    out = values.new_zeros(packed.batch_size)
    out.index_add_(0, packed.instance_ids, values)
    return out
