"""Procedural labeled image dataset with exact object masks.

Each image contains exactly one shape (the class) rendered over a procedural
background texture. Texture kind, colors, object color, position, rotation and
scale are all drawn independently of the label, so background content carries
no class signal and the object is the only predictive feature. Ground-truth
masks come from the renderer's own coverage (anti-aliased alpha thresholded at
0.5), and superpixel partitions are precomputed and cached with the data.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ConfigError
from .regions import RegionPartition, slic_partition

DATASET_FORMAT_VERSION = 1

SHAPE_KINDS = ("disc", "square", "triangle", "cross")
TEXTURE_KINDS = ("noise", "stripes", "checker", "blotches")


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings; fully determines the dataset given the seed."""

    image_size: int = 48
    num_classes: int = 4
    shapes: tuple = SHAPE_KINDS
    textures: tuple = TEXTURE_KINDS
    area_fraction_low: float = 0.07
    area_fraction_high: float = 0.22
    train_count: int = 2000
    test_count: int = 400
    seed: int = 0
    n_segments: int = 36
    compactness: float = 20.0

    def __post_init__(self):
        if self.num_classes != len(self.shapes):
            raise ConfigError("need one shape kind per class")
        if self.train_count % self.num_classes or self.test_count % self.num_classes:
            raise ConfigError("split sizes must be divisible by the class count")
        if not 0.05 <= self.area_fraction_low < self.area_fraction_high <= 0.35:
            raise ConfigError("object area fractions must stay within [0.05, 0.35]")


@dataclass
class LabeledInstance:
    """One (image, label, ground-truth mask, cached partition) record."""

    image: np.ndarray
    label: int
    m_star: np.ndarray
    partition: RegionPartition


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


def _bilinear_upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gh, gw = grid.shape
    ys = np.linspace(0.0, gh - 1.0, h)
    xs = np.linspace(0.0, gw - 1.0, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, gh - 2) if gh > 1 else np.zeros(h, int)
    x0 = np.clip(np.floor(xs).astype(int), 0, gw - 2) if gw > 1 else np.zeros(w, int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, np.minimum(x0 + 1, gw - 1))]
    c = grid[np.ix_(np.minimum(y0 + 1, gh - 1), x0)]
    d = grid[np.ix_(np.minimum(y0 + 1, gh - 1), np.minimum(x0 + 1, gw - 1))]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def _lerp_colors(t: np.ndarray, c1: np.ndarray, c2: np.ndarray) -> np.ndarray:
    return c1[None, None, :] * (1.0 - t[..., None]) + c2[None, None, :] * t[..., None]


def _render_texture(kind: str, h: int, w: int, rng: np.random.Generator):
    """Background canvas plus its two palette colors."""
    c1 = rng.uniform(0.08, 0.92, size=3)
    c2 = rng.uniform(0.08, 0.92, size=3)
    yy, xx = np.indices((h, w), dtype=np.float64)
    if kind == "noise":
        g = int(rng.integers(3, 7))
        t = _bilinear_upsample(rng.uniform(0.0, 1.0, size=(g, g)), h, w)
    elif kind == "stripes":
        theta = rng.uniform(0.0, np.pi)
        wavelength = rng.uniform(6.0, 16.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        t = 0.5 + 0.5 * np.sin(
            2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / wavelength + phase
        )
    elif kind == "checker":
        cell = int(rng.integers(4, 11))
        oy, ox = rng.integers(0, cell, size=2)
        t = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    elif kind == "blotches":
        g = int(rng.integers(4, 9))
        field_map = _bilinear_upsample(rng.uniform(0.0, 1.0, size=(g, g)), h, w)
        t = (field_map > np.median(field_map)).astype(np.float64)
    else:
        raise ConfigError(f"unknown texture kind {kind!r}")
    return np.clip(_lerp_colors(t, c1, c2), 0.0, 1.0), (c1, c2)


_TRIANGLE_AREA_FACTOR = 3.0 * np.sqrt(3.0) / 4.0
_CROSS_WIDTH_RATIO = 0.3


def _shape_geometry(kind: str, area: float) -> tuple[dict, float]:
    """Size parameters and bounding radius for a target pixel area."""
    if kind == "disc":
        r = np.sqrt(area / np.pi)
        return {"r": r}, r
    if kind == "square":
        a = np.sqrt(area) / 2.0
        return {"a": a}, a * np.sqrt(2.0)
    if kind == "triangle":
        r = np.sqrt(area / _TRIANGLE_AREA_FACTOR)
        return {"r": r}, r
    if kind == "cross":
        b = np.sqrt(area / (8.0 * _CROSS_WIDTH_RATIO - 4.0 * _CROSS_WIDTH_RATIO**2))
        return {"b": b, "c": _CROSS_WIDTH_RATIO * b}, b * np.sqrt(1.0 + _CROSS_WIDTH_RATIO**2)
    raise ConfigError(f"unknown shape kind {kind!r}")


def _shape_inside(kind: str, params: dict, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if kind == "disc":
        return u * u + v * v <= params["r"] ** 2
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= params["a"]
    if kind == "triangle":
        r = params["r"]
        vertices = [
            (r * np.cos(a), r * np.sin(a))
            for a in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3)
        ]
        inside = np.ones_like(u, dtype=bool)
        for (x1, y1), (x2, y2) in zip(vertices, vertices[1:] + vertices[:1]):
            inside &= (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1) >= 0
        return inside
    if kind == "cross":
        b, c = params["b"], params["c"]
        bar1 = (np.abs(u) <= b) & (np.abs(v) <= c)
        bar2 = (np.abs(u) <= c) & (np.abs(v) <= b)
        return bar1 | bar2
    raise ConfigError(f"unknown shape kind {kind!r}")


def _render_alpha(
    kind: str, params: dict, center: tuple, angle: float, h: int, w: int, supersample: int = 3
) -> np.ndarray:
    """Anti-aliased coverage of the shape via subpixel sampling."""
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    coverage = np.zeros((h, w))
    yy, xx = np.indices((h, w), dtype=np.float64)
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    for dy in offsets:
        for dx in offsets:
            py = yy + dy - center[0]
            px = xx + dx - center[1]
            u = cos_a * px + sin_a * py
            v = -sin_a * px + cos_a * py
            coverage += _shape_inside(kind, params, u, v)
    return coverage / supersample**2


def _pick_object_color(rng: np.random.Generator, palette) -> np.ndarray:
    best, best_dist = None, -1.0
    for _ in range(64):
        candidate = rng.uniform(0.02, 0.98, size=3)
        dist = min(float(np.linalg.norm(candidate - c)) for c in palette)
        if dist > best_dist:
            best, best_dist = candidate, dist
        if dist >= 0.55:
            return candidate
    return best


def render_instance(spec: SyntheticSpec, label: int, rng: np.random.Generator):
    """One labeled image: texture background, exactly one shape, exact mask."""
    h = w = spec.image_size
    texture_kind = spec.textures[int(rng.integers(len(spec.textures)))]
    background, palette = _render_texture(texture_kind, h, w, rng)

    fraction = rng.uniform(spec.area_fraction_low, spec.area_fraction_high)
    params, bound = _shape_geometry(spec.shapes[label], fraction * h * w)
    margin = 2.0
    low, high = margin + bound, h - 1.0 - margin - bound
    if high <= low:
        center = ((h - 1) / 2.0, (w - 1) / 2.0)
    else:
        center = (rng.uniform(low, high), rng.uniform(low, high))
    angle = rng.uniform(0.0, 2 * np.pi)
    alpha = _render_alpha(spec.shapes[label], params, center, angle, h, w)

    color = _pick_object_color(rng, palette)
    image = background * (1.0 - alpha[..., None]) + color[None, None, :] * alpha[..., None]
    m_star = alpha > 0.5
    return np.moveaxis(image, -1, 0).astype(np.float32), m_star


def _instance_rng(seed: int, split: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, split, index]))


def generate(spec: SyntheticSpec, with_partitions: bool = True) -> SyntheticDataset:
    """Render both splits; class-balanced, reproducible from the seed alone."""
    dataset = SyntheticDataset(spec=spec)
    for split_id, count, bucket in ((0, spec.train_count, dataset.train), (1, spec.test_count, dataset.test)):
        for index in range(count):
            label = index % spec.num_classes
            rng = _instance_rng(spec.seed, split_id, index)
            image, m_star = render_instance(spec, label, rng)
            if not m_star.any():
                raise RuntimeError(f"degenerate empty mask at split {split_id} index {index}")
            partition = (
                slic_partition(image, spec.n_segments, spec.compactness)
                if with_partitions
                else RegionPartition(
                    labels=np.zeros((spec.image_size, spec.image_size), np.int32),
                    region_sizes=np.array([spec.image_size**2]),
                )
            )
            bucket.append(
                LabeledInstance(image=image, label=label, m_star=m_star, partition=partition)
            )
    return dataset


def _split_arrays(instances: Sequence[LabeledInstance]) -> dict:
    sizes = np.concatenate([inst.partition.region_sizes for inst in instances])
    offsets = np.concatenate(
        [[0], np.cumsum([inst.partition.region_count for inst in instances])]
    )
    return {
        "images": np.stack([inst.image for inst in instances]),
        "labels": np.array([inst.label for inst in instances], dtype=np.int64),
        "m_star": np.stack([inst.m_star for inst in instances]),
        "partition_labels": np.stack([inst.partition.labels for inst in instances]),
        "region_sizes": sizes.astype(np.int64),
        "region_offsets": offsets.astype(np.int64),
    }


def _split_checksum(arrays: dict) -> str:
    digest = hashlib.sha256()
    for key in sorted(arrays):
        digest.update(key.encode())
        digest.update(np.ascontiguousarray(arrays[key]).tobytes())
    return digest.hexdigest()


def save_dataset(out_dir, dataset: SyntheticDataset) -> dict:
    """Persist both splits plus a manifest with content checksums."""
    os.makedirs(out_dir, exist_ok=True)
    checksums = {}
    for name, instances in (("train", dataset.train), ("test", dataset.test)):
        arrays = _split_arrays(instances)
        checksums[name] = _split_checksum(arrays)
        path = os.path.join(os.fspath(out_dir), f"{name}.npz")
        fd, tmp_path = tempfile.mkstemp(dir=os.fspath(out_dir), suffix=".tmp")
        with os.fdopen(fd, "wb") as handle:
            np.savez(handle, **arrays)
        os.replace(tmp_path, path)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "spec": asdict(dataset.spec),
        "checksums": checksums,
    }
    manifest_path = os.path.join(os.fspath(out_dir), "manifest.json")
    fd, tmp_path = tempfile.mkstemp(dir=os.fspath(out_dir), suffix=".tmp")
    with os.fdopen(fd, "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
    os.replace(tmp_path, manifest_path)
    return manifest


def read_manifest(data_dir) -> dict:
    manifest_path = os.path.join(os.fspath(data_dir), "manifest.json")
    if not os.path.exists(manifest_path):
        raise ConfigError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as handle:
        return json.load(handle)


def _instances_from_arrays(arrays: dict) -> list:
    instances = []
    offsets = arrays["region_offsets"]
    for i in range(arrays["images"].shape[0]):
        sizes = arrays["region_sizes"][offsets[i] : offsets[i + 1]]
        partition = RegionPartition(labels=arrays["partition_labels"][i], region_sizes=sizes)
        instances.append(
            LabeledInstance(
                image=arrays["images"][i],
                label=int(arrays["labels"][i]),
                m_star=arrays["m_star"][i],
                partition=partition,
            )
        )
    return instances


def load_dataset(data_dir) -> SyntheticDataset:
    """Load splits, verifying content checksums against the manifest."""
    manifest = read_manifest(data_dir)
    spec = SyntheticSpec(
        **{
            key: tuple(value) if isinstance(value, list) else value
            for key, value in manifest["spec"].items()
        }
    )
    dataset = SyntheticDataset(spec=spec)
    for name, bucket in (("train", dataset.train), ("test", dataset.test)):
        path = os.path.join(os.fspath(data_dir), f"{name}.npz")
        try:
            with np.load(path) as data:
                arrays = {key: data[key] for key in data.files}
        except (OSError, ValueError, KeyError, zipfile.BadZipFile) as err:
            raise ConfigError(f"unreadable split {name!r} in {data_dir}: {err}") from err
        if _split_checksum(arrays) != manifest["checksums"][name]:
            raise ConfigError(f"checksum mismatch for split {name!r} in {data_dir}")
        bucket.extend(_instances_from_arrays(arrays))
    return dataset
