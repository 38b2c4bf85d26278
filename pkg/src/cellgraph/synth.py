"""Deterministic synthetic dataset generator.

Mirrors the production dataset's statistics at desk scale: a configurable
number of cases with a fixed melanoma/healthy split, a dozen antigen
channels per sample, and a few hundred elliptical cells per image. The
class signal is injected twice so both feature families carry it: tumor
cells draw elevated mean intensity on marker channels (expression
profiles) and higher per-pixel noise variance (texture features).

Cells are laid out on a jittered grid. Grid spacing bounds jitter and
radii so non-overlap is guaranteed geometrically whenever the requested
density is feasible; infeasible densities fail with the achieved count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .dataset import (
    CellTable,
    ChannelImage,
    Dataset,
    LabelMask,
    Sample,
    StainStack,
    save_dataset,
)
from .rng import Xoshiro256StarStar

BACKGROUND_VALUE = 300
CELL_MEAN_SIGMA = 600.0
SAMPLE_WOBBLE_SIGMA = 150.0  # per-sample staining variation around the channel base
PIXEL_NOISE_SIGMA = 500.0
MAX_PLACEMENT_RETRIES = 20


class SynthesisError(Exception):
    """Raised when the requested cell density cannot be realized."""


@dataclass
class SynthConfig:
    n_samples: int = 6
    n_melanoma: int = 3
    image_size: int = 256
    n_channels: int = 12
    cells_per_sample: int = 300
    tumor_fraction: float = 0.4
    marker_channel_fraction: float = 0.5
    intensity_separation: float = 3.0
    texture_contrast_separation: float = 1.0
    pixel_spacing_um: float = 0.45
    seed: int = 7

    def __post_init__(self):
        if self.n_melanoma > self.n_samples:
            raise ValueError("n_melanoma must not exceed n_samples")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if self.n_channels < 2:
            raise ValueError("n_channels must be >= 2")
        if not 0.0 <= self.tumor_fraction <= 1.0:
            raise ValueError("tumor_fraction must lie in [0, 1]")

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def n_marker_channels(self) -> int:
        return max(1, math.ceil(self.marker_channel_fraction * self.n_channels))


def generate_synthetic_dataset(config: SynthConfig, out_dir: str | None = None):
    """Generate the dataset; optionally serialize it to ``out_dir``.

    Returns ``(dataset, truth)`` where ``truth`` is the pooled ground-truth
    cell table (ids, centroids, class labels) across all samples. Output is
    a pure function of the config: the root seed expands through splitmix64
    into one xoshiro256** stream per sample (stream 0 is reserved for
    dataset-level draws such as the per-channel intensity baselines).
    """
    base_stream = Xoshiro256StarStar.stream_for(config.seed, 0)
    channel_bases = [base_stream.uniform_in(14000.0, 18000.0) for _ in range(config.n_channels)]
    samples = []
    for idx in range(config.n_samples):
        stream = Xoshiro256StarStar.stream_for(config.seed, idx + 1)
        diagnosis = "melanoma" if idx < config.n_melanoma else "healthy"
        samples.append(_generate_sample(config, idx, diagnosis, stream, channel_bases))
    dataset = Dataset(samples=samples, pixel_spacing_um=config.pixel_spacing_um)
    if out_dir is not None:
        save_dataset(dataset, out_dir)
    truth = concat_tables([s.cells for s in dataset.samples])
    return dataset, truth


def concat_tables(tables: list) -> CellTable:
    if not tables:
        raise ValueError("no tables to concatenate")
    names = tables[0].feature_names
    for t in tables:
        if t.feature_names != names:
            raise ValueError("feature names differ across tables")
    return CellTable(
        cell_ids=np.concatenate([t.cell_ids for t in tables]),
        sample_ids=[sid for t in tables for sid in t.sample_ids],
        centroids=np.concatenate([t.centroids for t in tables]),
        labels=np.concatenate([t.labels for t in tables]),
        features=np.concatenate([t.features for t in tables]),
        feature_names=list(names),
    )


def _generate_sample(config: SynthConfig, index: int, diagnosis: str, stream, channel_bases: list) -> Sample:
    sid = f"s{index + 1:02d}"
    size = config.image_size
    target = config.cells_per_sample

    ellipses = _place_cells(stream, size, target, sid)
    n_cells = len(ellipses)

    mask = np.zeros((size, size), dtype=np.uint32)
    pixel_sets = []
    for cid, ell in enumerate(ellipses, start=1):
        rows, cols = _ellipse_pixels(ell, size)
        mask[rows, cols] = cid
        pixel_sets.append((rows, cols))

    labels = np.zeros(n_cells, dtype=np.int64)
    if diagnosis == "melanoma" and config.tumor_fraction > 0:
        n_tumor = int(round(config.tumor_fraction * n_cells))
        order = list(range(n_cells))
        stream.shuffle(order)
        for i in order[:n_tumor]:
            labels[i] = 1

    n_markers = config.n_marker_channels
    sample_bases = [base + stream.normal(0.0, SAMPLE_WOBBLE_SIGMA) for base in channel_bases]
    tumor_shift = config.intensity_separation * CELL_MEAN_SIGMA
    tumor_noise = PIXEL_NOISE_SIGMA * (1.0 + config.texture_contrast_separation)

    planes = [np.full((size, size), BACKGROUND_VALUE, dtype=np.float64) for _ in range(config.n_channels)]
    for i, (rows, cols) in enumerate(pixel_sets):
        is_tumor = labels[i] == 1
        sigma_px = tumor_noise if is_tumor else PIXEL_NOISE_SIGMA
        for k in range(config.n_channels):
            mean = sample_bases[k] + stream.normal(0.0, CELL_MEAN_SIGMA)
            if is_tumor and k < n_markers:
                mean += tumor_shift
            values = [mean + stream.normal(0.0, sigma_px) for _ in range(len(rows))]
            planes[k][rows, cols] = values

    channels = []
    for k in range(config.n_channels):
        values = np.clip(np.rint(planes[k]), 0, 65535).astype(np.uint16)
        channels.append((f"ag{k + 1:02d}", ChannelImage(width=size, height=size, values=values)))

    centroids = np.zeros((n_cells, 2))
    for i, (rows, cols) in enumerate(pixel_sets):
        centroids[i] = (cols.mean(), rows.mean())

    cells = CellTable(
        cell_ids=np.arange(1, n_cells + 1, dtype=np.int64),
        sample_ids=[sid] * n_cells,
        centroids=centroids,
        labels=labels,
        features=np.zeros((n_cells, 0)),
        feature_names=[],
    )
    return Sample(
        stack=StainStack(sample_id=sid, channels=tuple(channels), pixel_spacing_um=config.pixel_spacing_um),
        mask=LabelMask(width=size, height=size, labels=mask),
        cells=cells,
        diagnosis=diagnosis,
    )


def _place_cells(stream, size: int, target: int, sid: str) -> list:
    """Jittered-grid ellipse parameters (cx, cy, a, b, theta) for each cell.

    Radii <= 0.30 * spacing and jitter <= 0.15 * spacing keep any two cells
    (and the image border) from touching. Spacings too small to fit a
    minimal ellipse exhaust their retries and abort with the achieved count.
    """
    side = math.ceil(math.sqrt(target))
    spacing = size / side
    sites = [(r, c) for r in range(side) for c in range(side)]
    if len(sites) > target:
        stream.shuffle(sites)
        sites = sites[:target]
        sites.sort()

    ellipses = []
    for r, c in sites:
        placed = False
        for _ in range(MAX_PLACEMENT_RETRIES):
            cx = (c + 0.5) * spacing + stream.uniform_in(-0.15, 0.15) * spacing
            cy = (r + 0.5) * spacing + stream.uniform_in(-0.15, 0.15) * spacing
            a = stream.uniform_in(0.22, 0.30) * spacing
            b = stream.uniform_in(0.18, 0.26) * spacing
            if b > a:
                a, b = b, a
            theta = stream.uniform_in(0.0, math.pi)
            if b < 1.2:
                continue  # too thin to rasterize a connected region
            ellipses.append((cx, cy, a, b, theta))
            placed = True
            break
        if not placed:
            raise SynthesisError(
                f"sample {sid}: cell placement failed at density "
                f"{target}/{size}x{size} (achieved {len(ellipses)} cells); "
                f"increase image_size or lower cells_per_sample"
            )
    return ellipses


def _ellipse_pixels(ellipse, size: int):
    cx, cy, a, b, theta = ellipse
    r0 = max(0, int(math.floor(cy - a)))
    r1 = min(size - 1, int(math.ceil(cy + a)))
    c0 = max(0, int(math.floor(cx - a)))
    c1 = min(size - 1, int(math.ceil(cx + a)))
    rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    dx = cc - cx
    dy = rr - cy
    ct, st = math.cos(theta), math.sin(theta)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    inside = u * u + v * v <= 1.0
    return rr[inside], cc[inside]
