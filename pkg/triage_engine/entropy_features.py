#!/usr/bin/env python
# -*- coding:utf-8 -*-
"""Byte-entropy images of binaries.

A file is cut into fixed-length segments, each segment's Shannon entropy
over its byte histogram is computed, and the resulting stream is resampled
into a square grid that the embedder consumes.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.ndimage

import triage_engine.settings as settings
from triage_engine.errors import EmptyInputError, GraphStateError

log = logging.getLogger('triage_engine')

MAX_ENTROPY = 8.0  # bits, 256 distinct byte values
ROTATIONS = (0, 90, 180, 270)


@dataclass(frozen=True)
class ByteSegment:
    data: bytes
    offset: int = 0

    def __post_init__(self):
        if not self.data:
            raise EmptyInputError("A byte segment cannot be empty")

    def __len__(self):
        return len(self.data)


@dataclass(frozen=True, eq=False)
class EntropyStream:
    values: np.ndarray
    source_len: int
    segment_len: int = settings.SEGMENT_LEN

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class EntropyGraph:
    pixels: np.ndarray
    normalized: bool = False
    provenance: str = ''
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError(f"Entropy graph must be 2-D, got shape {self.pixels.shape}")
        self.pixels.setflags(write=False)

    @property
    def shape(self) -> tuple:
        return self.pixels.shape

    def reprJSON(self) -> dict:
        return {'provenance': self.provenance, 'normalized': self.normalized,
                'shape': list(self.shape)}


def segment_bytes(file_bytes: bytes, l: int = settings.SEGMENT_LEN) -> list:
    """Split a byte string into consecutive segments of l bytes, the last
    segment keeps whatever remains."""
    if l < 1:
        raise ValueError(f"Segment length must be >= 1, got {l}")
    if not file_bytes:
        raise EmptyInputError("Cannot segment an empty file")
    file_bytes = bytes(file_bytes)
    return [ByteSegment(file_bytes[i:i + l], offset=i) for i in range(0, len(file_bytes), l)]


def shannon_entropy(segment: ByteSegment or bytes) -> float:
    """Entropy in bits of the byte-value histogram of one segment."""
    data = segment.data if isinstance(segment, ByteSegment) else bytes(segment)
    if not data:
        raise EmptyInputError("Cannot compute the entropy of an empty segment")
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    p = counts[counts > 0] / len(data)
    h = -np.sum(p * np.log2(p))
    return float(max(0.0, h))


def entropy_stream(file_bytes: bytes, l: int = settings.SEGMENT_LEN) -> EntropyStream:
    segments = segment_bytes(file_bytes, l)
    values = np.array([shannon_entropy(s) for s in segments], dtype=np.float64)
    values.setflags(write=False)
    return EntropyStream(values=values, source_len=len(file_bytes), segment_len=l)


def rasterize(stream: EntropyStream, size: int = settings.GRAPH_SIZE,
              provenance: str = '') -> EntropyGraph:
    """Scale entropies into [0, 1] and resample the stream linearly to
    size * size points written row-major."""
    values = np.asarray(stream.values, dtype=np.float64)
    if values.size == 0:
        raise EmptyInputError("Cannot rasterize an empty entropy stream")
    npix = size * size
    scaled = values / MAX_ENTROPY
    if scaled.size == npix:
        flat = scaled.copy()
    else:
        positions = np.linspace(0, scaled.size - 1, npix)
        flat = np.interp(positions, np.arange(scaled.size), scaled)
    return EntropyGraph(pixels=flat.reshape(size, size), normalized=False,
                        provenance=provenance)


def normalize_graph(graph: EntropyGraph, mean: float = settings.GRAPH_MEAN,
                    std: float = settings.GRAPH_STD) -> EntropyGraph:
    if graph.normalized:
        raise GraphStateError(f"Graph {graph.provenance!r} is already normalized")
    if not std > 0:
        raise ValueError(f"Normalization std must be > 0, got {std}")
    pixels = (graph.pixels - mean) / std
    return replace(graph, pixels=pixels, normalized=True)


def rotate(graph: EntropyGraph, angle: int) -> EntropyGraph:
    """Clockwise rotation by a multiple of 90 degrees."""
    if angle % 90:
        raise ValueError(f"Only multiples of 90 degrees are supported, got {angle}")
    if graph.shape[0] != graph.shape[1]:
        raise ValueError(f"Rotation needs a square graph, got {graph.shape}")
    k = (angle // 90) % 4
    pixels = np.rot90(graph.pixels, k=-k).copy()
    return replace(graph, pixels=pixels, meta={**graph.meta, 'rotation': angle})


def augment_rotations(graph: EntropyGraph) -> list:
    """The graph itself followed by its 90, 180 and 270 degree rotations."""
    return [graph] + [rotate(graph, a) for a in ROTATIONS[1:]]


def rescale_crop(graph: EntropyGraph, scale: float, top: int, left: int) -> EntropyGraph:
    """Zoom in bilinearly by scale and crop back to the original size."""
    if scale < 1:
        raise ValueError(f"Rescale factor must be >= 1, got {scale}")
    size = graph.shape[0]
    zoomed = scipy.ndimage.zoom(graph.pixels, scale, order=1)
    if top + size > zoomed.shape[0] or left + size > zoomed.shape[1]:
        raise ValueError(f"Crop ({top}, {left}) falls outside the zoomed graph {zoomed.shape}")
    pixels = zoomed[top:top + size, left:left + size].copy()
    return replace(graph, pixels=pixels,
                   meta={**graph.meta, 'rescale': [scale, top, left]})


def random_rescale_crop(graph: EntropyGraph, rng: np.random.Generator,
                        max_scale: float = settings.RESCALE_MAX) -> EntropyGraph:
    size = graph.shape[0]
    scale = float(rng.uniform(1.0, max_scale))
    zsize = int(round(size * scale))
    top, left = (int(x) for x in rng.integers(0, zsize - size + 1, size=2))
    return rescale_crop(graph, scale, top, left)


def augment_class(graphs: list, minimum: int = settings.AUGMENT_MIN,
                  rng: np.random.Generator = None) -> list:
    """Extra graphs for a class holding fewer than minimum samples.
    Rotations of every original come first, rescale-crops of the originals
    fill whatever is still missing. Returns only the new graphs."""
    if not graphs:
        return []
    missing = minimum - len(graphs)
    if missing <= 0:
        return []
    rng = np.random.default_rng(0) if rng is None else rng
    extra = []
    for angle in ROTATIONS[1:]:
        for g in graphs:
            if len(extra) == missing:
                return extra
            extra.append(rotate(g, angle))
    while len(extra) < missing:
        g = graphs[int(rng.integers(len(graphs)))]
        extra.append(random_rescale_crop(g, rng))
    log.debug(f"Augmented class from {len(graphs)} to {len(graphs) + len(extra)} samples")
    return extra


def graph_from_bytes(file_bytes: bytes, l: int = settings.SEGMENT_LEN,
                     size: int = settings.GRAPH_SIZE, provenance: str = '') -> EntropyGraph:
    return rasterize(entropy_stream(file_bytes, l), size=size, provenance=provenance)


def extract_file(path: str or Path, l: int = settings.SEGMENT_LEN,
                 size: int = settings.GRAPH_SIZE) -> EntropyGraph:
    path = Path(path)
    with open(path, 'rb') as f:
        data = f.read()
    if not data:
        raise EmptyInputError(f"Empty file: {path}")
    return graph_from_bytes(data, l=l, size=size, provenance=str(path))


def entropy_ceiling(l: int) -> float:
    """Largest entropy a segment of l bytes can reach."""
    return min(MAX_ENTROPY, math.log2(l)) if l > 1 else 0.0


def plot_entropy_graph(graph: EntropyGraph, ax=None, title: str = None):
    import matplotlib.pyplot as plt

    if ax is None:
        f = plt.figure(figsize=(6, 6), dpi=80)
        ax = f.add_subplot(1, 1, 1)
    vmin, vmax = (None, None) if graph.normalized else (0.0, 1.0)
    im = ax.imshow(graph.pixels, cmap='viridis', vmin=vmin, vmax=vmax)
    ax.set_title(title or Path(graph.provenance).name)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.figure.colorbar(im, ax=ax, fraction=0.046)
    return ax
