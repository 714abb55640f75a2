"""Stochastic region selection: distribution parameters, sampling, masking.

A dense-prediction network maps an image (plus a constant sparsity-budget
plane) to a per-pixel mean map and a per-pixel embedding map. Aggregating both
within each region yields a correlated selection distribution over regions:
logits are Gaussian with mean mu and covariance E E^T, so probabilities follow
a logit-normal law and the covariance is positive semi-definite by
construction. Binary masks come from a binary-concrete relaxation with an
optional straight-through hard forward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .batching import PackedPartitions, broadcast_regions, pack_partitions, region_mean
from .exceptions import NumericalError
from .regions import RegionPartition

LOGIT_CLAMP = 15.0


def _conv_block(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, stride=stride, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class SelectorNetwork(nn.Module):
    """Encoder-decoder that predicts selection parameters at pixel level.

    Input is the image concatenated with a constant plane holding the sparsity
    budget, so one network serves every budget. Two 1x1 heads produce the
    logit-mean map [B, H, W] and the embedding map [B, K, H, W].
    """

    def __init__(self, in_channels: int = 3, embedding_dim: int = 3, base_width: int = 16):
        super().__init__()
        self.in_channels = in_channels
        self.embedding_dim = embedding_dim
        self.base_width = base_width
        w = base_width
        self.enc0 = _conv_block(in_channels + 1, w)
        self.enc1 = _conv_block(w, 2 * w, stride=2)
        self.enc2 = _conv_block(2 * w, 4 * w, stride=2)
        self.enc3 = _conv_block(4 * w, 4 * w, stride=2)
        self.dec2 = _conv_block(4 * w + 4 * w, 2 * w)
        self.dec1 = _conv_block(2 * w + 2 * w, w)
        self.dec0 = _conv_block(w + w, w)
        self.head_mean = nn.Conv2d(w, 1, kernel_size=1)
        self.head_embed = nn.Conv2d(w, embedding_dim, kernel_size=1)
        # Start with a near-zero covariance so the l1 penalty on E E^T does not
        # dominate the loss before the correlations earn their keep, and with
        # mostly-open masks so the classifier gets signal before the sparsity
        # budget starts closing regions.
        nn.init.normal_(self.head_embed.weight, std=0.01)
        nn.init.zeros_(self.head_embed.bias)
        nn.init.constant_(self.head_mean.bias, 2.0)

    def hyperparameters(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "embedding_dim": self.embedding_dim,
            "base_width": self.base_width,
        }

    def forward(self, images: torch.Tensor, tau: torch.Tensor):
        b, _, h, w = images.shape
        plane = tau.to(images.dtype).view(b, 1, 1, 1).expand(b, 1, h, w)
        x0 = self.enc0(torch.cat([images, plane], dim=1))
        x1 = self.enc1(x0)
        x2 = self.enc2(x1)
        x3 = self.enc3(x2)
        up = nn.functional.interpolate(x3, size=x2.shape[-2:], mode="nearest")
        d2 = self.dec2(torch.cat([up, x2], dim=1))
        up = nn.functional.interpolate(d2, size=x1.shape[-2:], mode="nearest")
        d1 = self.dec1(torch.cat([up, x1], dim=1))
        up = nn.functional.interpolate(d1, size=x0.shape[-2:], mode="nearest")
        d0 = self.dec0(torch.cat([up, x0], dim=1))
        return self.head_mean(d0).squeeze(1), self.head_embed(d0)


@dataclass
class MaskDistribution:
    """Correlated selection distribution over the regions of one instance.

    mu[j] is the logit-space mean of region j, embeddings[j] its K-dim
    embedding, and covariance = embeddings @ embeddings.T exactly.
    """

    mu: torch.Tensor
    embeddings: torch.Tensor
    covariance: torch.Tensor
    partition: Optional[RegionPartition] = None

    @classmethod
    def from_parameters(
        cls,
        mu: torch.Tensor,
        embeddings: torch.Tensor,
        partition: Optional[RegionPartition] = None,
    ) -> "MaskDistribution":
        mu = torch.as_tensor(mu)
        embeddings = torch.as_tensor(embeddings)
        if embeddings.ndim != 2 or embeddings.shape[0] != mu.shape[0]:
            raise ValueError(
                f"embeddings must be D x K with D = len(mu), got {tuple(embeddings.shape)}"
            )
        return cls(
            mu=mu,
            embeddings=embeddings,
            covariance=embeddings @ embeddings.T,
            partition=partition,
        )

    @property
    def region_count(self) -> int:
        return int(self.mu.shape[0])


@dataclass
class RegionMask:
    """A per-region selection: probabilities, a binary mask, and (during
    training) the straight-through relaxation whose forward values equal the
    binary mask while gradients follow the soft sample."""

    probabilities: torch.Tensor
    hard: torch.Tensor
    partition: RegionPartition
    relaxed: Optional[torch.Tensor] = None

    @property
    def forward_values(self) -> torch.Tensor:
        return self.relaxed if self.relaxed is not None else self.hard


@dataclass
class MaskedImage:
    """An image with inactive regions zeroed out."""

    x_m: torch.Tensor
    pixel_mask: torch.Tensor
    source: torch.Tensor
    mask: RegionMask


def _to_float_tensor(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image.to(torch.float32)
    return torch.as_tensor(np.asarray(image), dtype=torch.float32)


def build_distribution(
    network: SelectorNetwork,
    image,
    partition: RegionPartition,
    tau: float,
) -> MaskDistribution:
    """Predict and aggregate the selection distribution of a single image."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    images = _to_float_tensor(image).unsqueeze(0)
    if images.shape[-2:] != partition.shape:
        raise ValueError("partition does not match image dimensions")
    packed = pack_partitions([partition])
    taus = torch.tensor([tau], dtype=torch.float32)
    mu, embeddings = aggregate_distribution_parameters(network, images, taus, packed)
    return MaskDistribution.from_parameters(mu, embeddings, partition)


def aggregate_distribution_parameters(
    network: SelectorNetwork,
    images: torch.Tensor,
    taus: torch.Tensor,
    packed: PackedPartitions,
):
    """Batched network evaluation plus region aggregation.

    Returns (mu [R], embeddings [R, K]) over all packed regions.
    """
    mean_map, embed_map = network(images, taus)
    if not (torch.isfinite(mean_map).all() and torch.isfinite(embed_map).all()):
        raise NumericalError("selector produced non-finite outputs")
    maps = torch.cat([mean_map.unsqueeze(1), embed_map], dim=1)
    aggregated = region_mean(maps, packed)
    return aggregated[:, 0], aggregated[:, 1:]


def sample_selection_logits(
    dist: MaskDistribution, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Reparameterized draw z = mu + E eps with eps ~ Normal(0, I_K).

    The factored form samples exactly from Normal(mu, E E^T) without ever
    decomposing the covariance, so rank-deficient covariances need no jitter.
    """
    eps = torch.randn(
        dist.embeddings.shape[1], dtype=dist.mu.dtype, generator=generator
    )
    return dist.mu + dist.embeddings @ eps


def sample_probabilities(
    dist: MaskDistribution, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Sample region selection probabilities from the logit-normal law."""
    z = sample_selection_logits(dist, generator)
    return torch.sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))


def mean_probabilities(dist: MaskDistribution) -> torch.Tensor:
    """Deterministic inference collapse: the distribution's median logistic(mu)."""
    return torch.sigmoid(dist.mu.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))


def binarize_gumbel(
    p,
    temperature: float,
    generator: Optional[torch.Generator] = None,
    hard: bool = True,
) -> torch.Tensor:
    """Binary-concrete relaxation of Bernoulli(p) sampling.

    y = sigmoid((logit(p) + g) / temperature) with logistic noise g (the
    difference of two standard Gumbel draws). With hard=True the forward value
    is the rounded sample while gradients follow the relaxation; the hard
    sample is Bernoulli(p)-distributed at any temperature.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    p = torch.as_tensor(p)
    u = torch.rand(p.shape, dtype=p.dtype, generator=generator)
    u = u.clamp(torch.finfo(p.dtype).tiny, 1.0)
    g = torch.log(u) - torch.log1p(-u)
    y = torch.sigmoid((torch.logit(p) + g) / temperature)
    if hard:
        # grouping keeps forward values exactly binary: y - y.detach() is 0.0
        y = (y > 0.5).to(y.dtype) + (y - y.detach())
    return y


def deterministic_binarize(p, cutoff: float = 0.5) -> torch.Tensor:
    """Threshold probabilities: m_j = 1 iff p_j > cutoff (strict)."""
    if not 0.0 < cutoff < 1.0:
        raise ValueError(f"cutoff must lie in (0, 1), got {cutoff}")
    p = torch.as_tensor(p)
    return (p > cutoff).to(p.dtype)


def sampled_mask(
    dist: MaskDistribution,
    temperature: float,
    generator: Optional[torch.Generator] = None,
) -> RegionMask:
    """Training-time mask: logit-normal probabilities, straight-through hard sample."""
    p = sample_probabilities(dist, generator)
    relaxed = binarize_gumbel(p, temperature, generator, hard=True)
    return RegionMask(
        probabilities=p,
        hard=relaxed.detach(),
        relaxed=relaxed,
        partition=dist.partition,
    )


def thresholded_mask(dist: MaskDistribution, cutoff: float = 0.5) -> RegionMask:
    """Inference-time mask: threshold logistic(mu), no sampling."""
    p = mean_probabilities(dist)
    return RegionMask(
        probabilities=p,
        hard=deterministic_binarize(p, cutoff),
        partition=dist.partition,
    )


def apply_mask(image, mask: RegionMask) -> MaskedImage:
    """Zero out the pixels of inactive regions.

    Active pixels keep their exact source values; in relaxed mode pixels are
    scaled by the per-region relaxation instead.
    """
    source = _to_float_tensor(image)
    if mask.partition is None or source.shape[-2:] != mask.partition.shape:
        raise ValueError("mask partition does not match image dimensions")
    labels = torch.from_numpy(mask.partition.labels.astype(np.int64))
    values = mask.forward_values.to(source.dtype)
    pixel_mask = values[labels.reshape(-1)].view(mask.partition.shape)
    return MaskedImage(
        x_m=source * pixel_mask, pixel_mask=pixel_mask, source=source, mask=mask
    )


def broadcast_mask_pixels(values: torch.Tensor, packed: PackedPartitions) -> torch.Tensor:
    """Batched pixel mask [B, H, W] from packed per-region values [R]."""
    return broadcast_regions(values, packed)


def ensure_eval_mode(*modules) -> None:
    """Switch networks to eval mode; tolerates bare callables used as stubs."""
    for module in modules:
        if hasattr(module, "eval"):
            module.eval()
