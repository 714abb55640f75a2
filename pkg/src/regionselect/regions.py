"""Partition images into perceptually coherent atomic regions.

The partitioner is a from-scratch SLIC superpixel implementation: k-means-like
clustering in a joint (color, position) space with assignments restricted to
local 2S x 2S windows, followed by a connectivity enforcement pass that merges
orphan fragments into their largest neighbour. Region-level aggregation and
broadcast operators live here as well, since everything downstream works on
region-valued vectors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

SLIC_ITERATIONS = 10


@dataclass(frozen=True)
class RegionPartition:
    """A disjoint cover of an H x W pixel grid by labeled regions.

    labels[h, w] is the region index of pixel (h, w), in [0, region_count).
    region_sizes[j] is the pixel count of region j.
    """

    labels: np.ndarray
    region_sizes: np.ndarray

    @property
    def region_count(self) -> int:
        return int(self.region_sizes.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        object.__setattr__(self, "labels", labels)
        sizes = np.ascontiguousarray(self.region_sizes, dtype=np.int64)
        object.__setattr__(self, "region_sizes", sizes)


def partition_from_labels(labels: np.ndarray) -> RegionPartition:
    """Build a partition from a label map, checking the disjoint-cover contract."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    d = int(labels.max()) + 1 if labels.size else 0
    if labels.min() < 0:
        raise ValueError("negative region label")
    sizes = np.bincount(labels.ravel(), minlength=d)
    if (sizes == 0).any():
        raise ValueError("every label in [0, D) must occur at least once")
    return RegionPartition(labels=labels, region_sizes=sizes)


def check_image(image: np.ndarray) -> np.ndarray:
    """Validate a channels x H x W image with values in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected channels x H x W image, got shape {image.shape}")
    _, h, w = image.shape
    if h < 8 or w < 8:
        raise ValueError(f"image must be at least 8 x 8, got {h} x {w}")
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return image


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Convert H x W x 3 sRGB in [0, 1] to CIELAB (D65 white point)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    linear = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    matrix = np.array(
        [
            [0.4124564, 0.3575761, 0.1804375],
            [0.2126729, 0.7151522, 0.0721750],
            [0.0193339, 0.1191920, 0.9503041],
        ]
    )
    xyz = linear @ matrix.T
    xyz /= np.array([0.95047, 1.0, 1.08883])
    cube = np.cbrt(xyz)
    f = np.where(xyz > 0.008856, cube, 7.787 * xyz + 16.0 / 116.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _color_features(image: np.ndarray) -> np.ndarray:
    """Per-pixel clustering features: CIELAB for 3-channel input, raw otherwise."""
    if image.shape[0] == 3:
        return rgb_to_lab(np.moveaxis(image, 0, -1))
    return np.moveaxis(image, 0, -1).copy()


def _gaussian_blur(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding, applied per channel."""
    radius = max(1, int(round(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    out = field.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for i, weight in enumerate(kernel):
            index = [slice(None)] * out.ndim
            index[axis] = slice(i, i + out.shape[axis])
            acc += weight * padded[tuple(index)]
        out = acc
    return out


def _grid_centers(h: int, w: int, n_segments: int) -> np.ndarray:
    """Initial cluster positions on a plain grid of cell centers, shape K x 2."""
    rows = max(1, round(np.sqrt(n_segments * h / w)))
    cols = max(1, round(n_segments / rows))
    rows, cols = min(rows, h), min(cols, w)
    ys = (np.arange(rows) + 0.5) * (h / rows) - 0.5
    xs = (np.arange(cols) + 0.5) * (w / cols) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


def slic_partition(
    image: np.ndarray,
    n_segments: int,
    compactness: float = 20.0,
    n_iter: int = SLIC_ITERATIONS,
    smoothing_sigma: float = 1.0,
) -> RegionPartition:
    """Segment an image into superpixels.

    Pixels are clustered by the distance sqrt(d_color^2 + (d_spatial / S)^2 * m^2)
    with S = sqrt(H W / n_segments) and m the compactness, using the standard
    assign/update loop where each cluster only competes for pixels inside a
    2S x 2S window around its center. Color features are lightly smoothed
    before clustering so pixel noise cannot shatter the segments. The result
    is connectivity-enforced, so the final region count may differ from
    n_segments; always read it from the returned partition.
    """
    image = check_image(image)
    _, h, w = image.shape
    if n_segments < 2:
        raise ValueError("n_segments must be at least 2")
    if n_segments > h * w:
        raise ValueError(f"n_segments={n_segments} exceeds pixel count {h * w}")
    if compactness <= 0:
        raise ValueError("compactness must be positive")

    feat = _color_features(image)
    if smoothing_sigma > 0:
        feat = _gaussian_blur(feat, smoothing_sigma)
    spacing = np.sqrt(h * w / n_segments)
    positions = _grid_centers(h, w, n_segments)
    iy = np.clip(np.round(positions[:, 0]).astype(int), 0, h - 1)
    ix = np.clip(np.round(positions[:, 1]).astype(int), 0, w - 1)
    colors = feat[iy, ix].astype(np.float64)

    yy, xx = np.indices((h, w), dtype=np.float64)
    spatial_weight = (compactness / spacing) ** 2
    reach = int(np.ceil(2.0 * spacing))
    labels = np.zeros((h, w), dtype=np.int32)

    for _ in range(n_iter):
        dist2 = np.full((h, w), np.inf)
        labels.fill(-1)
        for k in range(positions.shape[0]):
            cy, cx = positions[k]
            y0, y1 = max(0, int(cy) - reach), min(h, int(cy) + reach + 1)
            x0, x1 = max(0, int(cx) - reach), min(w, int(cx) + reach + 1)
            if y0 >= y1 or x0 >= x1:
                continue
            dc2 = ((feat[y0:y1, x0:x1] - colors[k]) ** 2).sum(axis=-1)
            ds2 = (yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2
            d2 = dc2 + spatial_weight * ds2
            closer = d2 < dist2[y0:y1, x0:x1]
            dist2[y0:y1, x0:x1][closer] = d2[closer]
            labels[y0:y1, x0:x1][closer] = k

        _assign_orphan_pixels(labels, positions)

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=positions.shape[0]).astype(np.float64)
        occupied = counts > 0
        sums_y = np.bincount(flat, weights=yy.ravel(), minlength=positions.shape[0])
        sums_x = np.bincount(flat, weights=xx.ravel(), minlength=positions.shape[0])
        positions[occupied, 0] = sums_y[occupied] / counts[occupied]
        positions[occupied, 1] = sums_x[occupied] / counts[occupied]
        for c in range(feat.shape[-1]):
            sums_c = np.bincount(
                flat, weights=feat[..., c].ravel(), minlength=positions.shape[0]
            )
            colors[occupied, c] = sums_c[occupied] / counts[occupied]

    partition = enforce_connectivity(partition_from_labels(_compact_labels(labels)))
    return _merge_down_to(partition, 2 * n_segments)


def _assign_orphan_pixels(labels: np.ndarray, positions: np.ndarray) -> None:
    """Attach window-uncovered pixels to the spatially nearest cluster in place."""
    missing = np.argwhere(labels < 0)
    if missing.size == 0:
        return
    d2 = ((missing[:, None, :] - positions[None, :, :]) ** 2).sum(axis=-1)
    labels[missing[:, 0], missing[:, 1]] = d2.argmin(axis=1)


def _compact_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel to a contiguous range, ordered by first row-major occurrence."""
    flat = labels.ravel()
    _, first = np.unique(flat, return_index=True)
    order = flat[np.sort(first)]
    remap = np.empty(int(flat.max()) + 1, dtype=np.int32)
    remap[order] = np.arange(order.shape[0], dtype=np.int32)
    return remap[labels]


def enforce_connectivity(partition: RegionPartition) -> RegionPartition:
    """Make every region 4-connected.

    Connected components of the label map become candidate regions; components
    smaller than (H W / D) / 4 pixels are merged into the largest adjacent
    region (sizes tracked as merges accumulate). Larger components of a split
    label survive as regions of their own.
    """
    labels = partition.labels
    h, w = labels.shape
    comp_ids, comp_sizes, adjacency = _connected_components(labels)
    threshold = (h * w / partition.region_count) / 4.0

    n_comp = comp_sizes.shape[0]
    parent = np.arange(n_comp)
    sizes = comp_sizes.astype(np.int64).copy()

    def find(c: int) -> int:
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    for c in sorted(range(n_comp), key=lambda c: (comp_sizes[c], c)):
        if comp_sizes[c] >= threshold:
            continue
        roots = {find(n) for n in adjacency[c]} - {find(c)}
        if not roots:
            continue
        target = max(roots, key=lambda r: (sizes[r], -r))
        sizes[target] += sizes[find(c)]
        parent[find(c)] = target

    final = np.array([find(c) for c in range(n_comp)])
    merged = final[comp_ids]
    return partition_from_labels(_compact_labels(merged))


def _merge_down_to(partition: RegionPartition, max_regions: int) -> RegionPartition:
    """Fold the smallest regions into their largest neighbour until the count
    fits. Regions stay connected; a no-op when already within the bound."""
    if partition.region_count <= max_regions:
        return partition
    labels = partition.labels.copy()
    sizes = {j: int(s) for j, s in enumerate(partition.region_sizes)}
    neighbors: dict[int, set[int]] = {j: set() for j in sizes}
    for a, b in zip(labels[1:, :].ravel(), labels[:-1, :].ravel()):
        if a != b:
            neighbors[int(a)].add(int(b))
            neighbors[int(b)].add(int(a))
    for a, b in zip(labels[:, 1:].ravel(), labels[:, :-1].ravel()):
        if a != b:
            neighbors[int(a)].add(int(b))
            neighbors[int(b)].add(int(a))

    while len(sizes) > max_regions:
        victim = min(sizes, key=lambda j: (sizes[j], j))
        target = max(neighbors[victim], key=lambda j: (sizes[j], -j))
        labels[labels == victim] = target
        sizes[target] += sizes.pop(victim)
        for other in neighbors.pop(victim):
            if other == target:
                continue
            neighbors[other].discard(victim)
            neighbors[other].add(target)
            neighbors[target].add(other)
        neighbors[target].discard(victim)
        neighbors[target].discard(target)
    return partition_from_labels(_compact_labels(labels))


def _connected_components(labels: np.ndarray):
    """4-connected components of a label map.

    Returns (component id map, component sizes, adjacency list of component
    index sets). Component ids follow row-major discovery order.
    """
    h, w = labels.shape
    comp_ids = np.full((h, w), -1, dtype=np.int32)
    sizes: list[int] = []
    adjacency: list[set[int]] = []

    for sy in range(h):
        for sx in range(w):
            if comp_ids[sy, sx] >= 0:
                continue
            cid = len(sizes)
            value = labels[sy, sx]
            sizes.append(0)
            adjacency.append(set())
            stack = [(sy, sx)]
            comp_ids[sy, sx] = cid
            count = 0
            while stack:
                y, x = stack.pop()
                count += 1
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if not (0 <= ny < h and 0 <= nx < w):
                        continue
                    if labels[ny, nx] == value:
                        if comp_ids[ny, nx] < 0:
                            comp_ids[ny, nx] = cid
                            stack.append((ny, nx))
                    elif comp_ids[ny, nx] >= 0:
                        adjacency[cid].add(int(comp_ids[ny, nx]))
                        adjacency[comp_ids[ny, nx]].add(cid)
            sizes[cid] = count

    return comp_ids, np.array(sizes, dtype=np.int64), adjacency


def aggregate_region_mean(pixel_map: np.ndarray, partition: RegionPartition) -> np.ndarray:
    """Average a pixel map within each region.

    Accepts H x W (returns length-D vector) or H x W x K (returns D x K).
    Means are computed in shifted form (reference pixel plus mean deviation),
    which makes the broadcast/aggregate round trip exact for region-constant
    maps.
    """
    pixel_map = np.asarray(pixel_map, dtype=np.float64)
    if pixel_map.ndim not in (2, 3) or pixel_map.shape[:2] != partition.shape:
        raise ValueError(
            f"pixel map shape {pixel_map.shape} does not match partition {partition.shape}"
        )
    if not np.isfinite(pixel_map).all():
        raise ValueError("pixel map contains non-finite values")
    flat = partition.labels.ravel()
    d = partition.region_count
    _, first = np.unique(flat, return_index=True)
    values = pixel_map.reshape(flat.shape[0], -1)
    refs = values[first]
    out = np.empty((d, values.shape[1]))
    for c in range(values.shape[1]):
        deviations = values[:, c] - refs[flat, c]
        out[:, c] = refs[:, c] + np.bincount(flat, weights=deviations, minlength=d) / partition.region_sizes
    return out[:, 0] if pixel_map.ndim == 2 else out


def broadcast_to_pixels(region_values: np.ndarray, partition: RegionPartition) -> np.ndarray:
    """Expand region-level values to the pixel grid: out[h, w] = v[labels[h, w]]."""
    region_values = np.asarray(region_values)
    if region_values.shape[0] != partition.region_count:
        raise ValueError(
            f"expected {partition.region_count} region values, got {region_values.shape[0]}"
        )
    return region_values[partition.labels]


def boundary_edge_count(labels: np.ndarray) -> int:
    """Number of 4-neighbor pixel pairs whose labels differ."""
    vertical = (labels[1:, :] != labels[:-1, :]).sum()
    horizontal = (labels[:, 1:] != labels[:, :-1]).sum()
    return int(vertical + horizontal)


def partition_cache_key(image: np.ndarray, n_segments: int, compactness: float) -> str:
    """Content hash identifying a partition: image bytes plus parameters."""
    image = np.ascontiguousarray(np.asarray(image, dtype=np.float64))
    digest = hashlib.sha256()
    digest.update(str(image.shape).encode())
    digest.update(image.tobytes())
    digest.update(f"n_segments={n_segments},compactness={compactness!r}".encode())
    return digest.hexdigest()


def save_partition(path, partition: RegionPartition) -> None:
    np.savez(path, labels=partition.labels, region_sizes=partition.region_sizes)


def load_partition(path) -> RegionPartition:
    with np.load(path) as data:
        return RegionPartition(labels=data["labels"], region_sizes=data["region_sizes"])
