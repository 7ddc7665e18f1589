#!/usr/bin/env python
# -*- coding:utf-8 -*-
"""Sample trees on disk, in-memory graph sets and N-way K-shot episodes.

A dataset root holds one directory per class, each holding raw binaries or
extracted .entg graphs: <root>/<class_name>/<sample files>.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import triage_engine.entropy_features as ef
import triage_engine.iotasks as iotasks
import triage_engine.settings as settings
from triage_engine.errors import EmptyInputError

log = logging.getLogger('triage_engine')

BASE = 'base'
NOVEL = 'novel'


@dataclass
class ClassEntry:
    name: str
    samples: list
    split: str = BASE

    def __len__(self):
        return len(self.samples)


@dataclass
class Dataset:
    root: str
    classes: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def class_names(self) -> list:
        return [c.name for c in self.classes]

    def counts(self) -> dict:
        return {c.name: len(c) for c in self.classes}

    def split(self, name: str) -> list:
        return [c for c in self.classes if c.split == name]

    def reprJSON(self) -> dict:
        return {'root': self.root, 'counts': self.counts(),
                'splits': {c.name: c.split for c in self.classes}}


def list_samples(folder: Path) -> list:
    return sorted(p for p in folder.iterdir() if p.is_file() and not p.name.startswith('.'))


def load_dataset(root: str or Path) -> Dataset:
    """Index <root>/<class>/<files> in lexicographic order. Empty class
    folders and unreadable files are skipped with a warning."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"Dataset root not found: {root}")
    ds = Dataset(root=str(root))
    for folder in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith('.')):
        samples = []
        for fpath in list_samples(folder):
            if not os.access(fpath, os.R_OK) or fpath.stat().st_size == 0:
                log.warning(f"Skipping unreadable or empty sample {fpath}")
                ds.skipped.append(str(fpath))
                continue
            samples.append(fpath)
        if not samples:
            log.warning(f"Class folder {folder.name} holds no readable samples, omitting it")
            continue
        ds.classes.append(ClassEntry(name=folder.name, samples=samples))
    if not ds.classes:
        raise IOError(f"No class folders with samples under {root}")
    for name, n in ds.counts().items():
        log.debug(f"{name}: {n} samples")
    log.info(f"Loaded {len(ds.classes)} classes, {sum(ds.counts().values())} samples from {root}")
    return ds


def split_dataset(ds: Dataset, split_seed: int = None) -> Dataset:
    """Class-level half split: the first half (lexicographic, or a seeded
    permutation when split_seed is given) is base, the rest novel."""
    order = list(range(len(ds.classes)))
    if split_seed is not None:
        order = [int(i) for i in np.random.default_rng(split_seed).permutation(len(order))]
    nbase = int(math.ceil(len(order) / 2))
    base = set(order[:nbase])
    for i, c in enumerate(ds.classes):
        c.split = BASE if i in base else NOVEL
    return ds


# =============================================================================
# IN-MEMORY GRAPH SETS
# =============================================================================
@dataclass(eq=False)
class GraphSet:
    """Normalized graphs (n, H, W) with integer labels indexing class_names."""
    X: np.ndarray
    y: np.ndarray
    class_names: list
    sample_ids: list

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.X) != len(self.y) or len(self.y) != len(self.sample_ids):
            raise ValueError("GraphSet arrays disagree in length")

    def __len__(self):
        return len(self.y)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.y == label)

    def counts(self) -> dict:
        return {name: int(np.sum(self.y == i)) for i, name in enumerate(self.class_names)}

    def subset(self, labels) -> 'GraphSet':
        """Keep only the given labels, relabelled 0..len(labels)-1 in order."""
        labels = list(labels)
        keep = np.flatnonzero(np.isin(self.y, labels))
        remap = {old: new for new, old in enumerate(labels)}
        return GraphSet(X=self.X[keep], y=np.array([remap[int(v)] for v in self.y[keep]]),
                        class_names=[self.class_names[i] for i in labels],
                        sample_ids=[self.sample_ids[i] for i in keep])

    def take(self, idx) -> 'GraphSet':
        idx = np.asarray(idx, dtype=np.int64)
        return GraphSet(X=self.X[idx], y=self.y[idx], class_names=list(self.class_names),
                        sample_ids=[self.sample_ids[i] for i in idx])


def load_graph(fpath: str or Path, l: int = settings.SEGMENT_LEN,
               size: int = settings.GRAPH_SIZE) -> ef.EntropyGraph:
    """Raw graph of one sample: decoded when it is an .entg file, extracted
    from the bytes otherwise."""
    if iotasks.is_graph_file(fpath):
        graph = iotasks.read_graph(fpath)
        if graph.shape != (size, size):
            raise ValueError(f"{fpath}: graph is {graph.shape}, expected {(size, size)}")
        return graph
    return ef.extract_file(fpath, l=l, size=size)


def build_graph_set(classes: list, l: int = settings.SEGMENT_LEN,
                    size: int = settings.GRAPH_SIZE, mean: float = settings.GRAPH_MEAN,
                    std: float = settings.GRAPH_STD, augment_min: int = 0,
                    seed: int = 0) -> GraphSet:
    """Load, augment (classes under augment_min) and normalize every sample
    of the given ClassEntry list."""
    rng = np.random.default_rng(seed)
    X, y, ids = [], [], []
    for label, entry in enumerate(classes):
        graphs = []
        for fpath in entry.samples:
            try:
                g = load_graph(fpath, l=l, size=size)
            except (OSError, EmptyInputError) as e:
                log.warning(f"Skipping {fpath}: {e}")
                continue
            graphs.append(g)
        raw = [g for g in graphs if not g.normalized]
        extra = ef.augment_class(raw, augment_min, rng) if augment_min else []
        for g in graphs + extra:
            g = g if g.normalized else ef.normalize_graph(g, mean, std)
            X.append(g.pixels)
            y.append(label)
            ids.append(sample_id(g))
        if extra:
            log.info(f"Augmented {entry.name}: {len(graphs)} -> {len(graphs) + len(extra)} samples")
    if not X:
        raise ValueError("No graphs could be loaded")
    return GraphSet(X=np.stack(X), y=np.array(y), class_names=[c.name for c in classes],
                    sample_ids=ids)


def sample_id(graph: ef.EntropyGraph) -> str:
    sid = graph.provenance
    if 'rotation' in graph.meta:
        sid += f"#rot{graph.meta['rotation']}"
    if 'rescale' in graph.meta:
        sid += '#rescale' + '_'.join(str(round(x, 4)) for x in graph.meta['rescale'])
    return sid


def extract_tree(input_path: str or Path, out: str or Path, l: int = settings.SEGMENT_LEN,
                 size: int = settings.GRAPH_SIZE, augment_min: int = 0, seed: int = 0) -> int:
    """Write an .entg graph for every sample. A class tree is mirrored
    under out, a single file or a flat folder lands directly in out.
    Returns the number of graphs written."""
    input_path, out = Path(input_path), Path(out)
    if input_path.is_file():
        iotasks.write_graph(ef.extract_file(input_path, l=l, size=size),
                            out / (input_path.name + iotasks.GRAPH_SUFFIX))
        return 1
    if not input_path.is_dir():
        raise FileNotFoundError(f"Input not found: {input_path}")
    if not any(p.is_dir() for p in input_path.iterdir()):
        files = list_samples(input_path)
        for fpath in files:
            iotasks.write_graph(ef.extract_file(fpath, l=l, size=size),
                                out / (fpath.name + iotasks.GRAPH_SUFFIX))
        return len(files)
    rng = np.random.default_rng(seed)
    written = 0
    for entry in load_dataset(input_path).classes:
        graphs = [ef.extract_file(p, l=l, size=size) for p in entry.samples]
        for g, p in zip(graphs, entry.samples):
            iotasks.write_graph(g, out / entry.name / (p.name + iotasks.GRAPH_SUFFIX))
        extra = ef.augment_class(graphs, augment_min, rng) if augment_min else []
        for i, g in enumerate(extra):
            stem = Path(g.provenance).name
            iotasks.write_graph(g, out / entry.name / f'{stem}.aug{i:03d}{iotasks.GRAPH_SUFFIX}')
        written += len(graphs) + len(extra)
        log.info(f"{entry.name}: wrote {len(graphs)} graphs (+{len(extra)} augmented)")
    return written


# =============================================================================
# SYNTHETIC CORPUS
# =============================================================================
@dataclass(frozen=True)
class SynthSpec:
    """Classes differ in their entropy regime: every class alternates a low
    and a high entropy band with its own levels and band period."""
    n_classes: int = 10
    samples_per_class: int = 40
    segment_len: int = settings.SEGMENT_LEN
    seed: int = 0
    base_segments: int = 64
    junk_rate: float = 0.05  # share of segments replaced by random-alphabet junk
    level_span: float = 5.2  # bits between the lowest and highest class band
    band_gap: float = 1.8  # bits between a class's low and high band

    def class_profile(self, c: int) -> dict:
        levels = np.random.default_rng([self.seed, 7919]).permutation(self.n_classes)
        k = int(levels[c])
        low = 0.4 + k * self.level_span / max(self.n_classes - 1, 1)
        return {
            'low_bits': low,
            'high_bits': min(low + self.band_gap, 7.6),
            'period': 2 + c % 3,
            'n_segments': self.base_segments + 8 * (c % 5),
            'offset': (37 * c) % 256,
        }


def _segment_of_bits(rng: np.random.Generator, bits: float, l: int, offset: int) -> np.ndarray:
    alphabet = max(1, int(round(2 ** bits)))
    return ((offset + rng.integers(0, alphabet, size=l)) % 256).astype(np.uint8)


def synth_sample(spec: SynthSpec, c: int, i: int) -> bytes:
    profile = spec.class_profile(c)
    rng = np.random.default_rng([spec.seed, c, i])
    l = spec.segment_len
    parts = []
    for s in range(profile['n_segments']):
        if rng.random() < spec.junk_rate:
            bits = float(rng.uniform(0, 8))
        elif (s // profile['period']) % 2:
            bits = profile['high_bits']
        else:
            bits = profile['low_bits']
        parts.append(_segment_of_bits(rng, bits, l, profile['offset']))
    tail = int(rng.integers(0, l))
    if tail:
        parts.append(_segment_of_bits(rng, profile['low_bits'], tail, profile['offset']))
    return np.concatenate(parts).tobytes()


def synth_dataset(spec: SynthSpec, out: str or Path) -> Dataset:
    """Materialize the synthetic corpus as <out>/class_XX/sample_YYY.bin."""
    out = Path(out)
    width = max(2, len(str(spec.n_classes - 1)))
    for c in range(spec.n_classes):
        folder = out / f'class_{c:0{width}d}'
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(spec.samples_per_class):
            with open(folder / f'sample_{i:03d}.bin', 'wb') as f:
                f.write(synth_sample(spec, c, i))
    log.info(f"Wrote {spec.n_classes} x {spec.samples_per_class} synthetic samples to {out}")
    return load_dataset(out)


# =============================================================================
# EPISODES
# =============================================================================
@dataclass(frozen=True, eq=False)
class Episode:
    """Indices into a GraphSet; labels remapped to 0..way-1 in draw order."""
    classes: np.ndarray
    support_idx: np.ndarray
    support_y: np.ndarray
    query_idx: np.ndarray
    query_y: np.ndarray

    @property
    def way(self) -> int:
        return len(self.classes)

    @property
    def shot(self) -> int:
        return len(self.support_idx) // self.way

    @property
    def query(self) -> int:
        return len(self.query_idx) // self.way


def eligible_classes(graph_set: GraphSet, need: int) -> tuple:
    counts = np.bincount(graph_set.y, minlength=graph_set.n_classes)
    ok = np.flatnonzero(counts >= need)
    short = [graph_set.class_names[i] for i in np.flatnonzero(counts < need)]
    return ok, short


def sample_episode(graph_set: GraphSet, way: int, shot: int, query: int,
                   rng: np.random.Generator) -> Episode:
    if way < 1 or shot < 1 or query < 1:
        raise ValueError(f"way, shot and query must be >= 1, got {way}, {shot}, {query}")
    eligible, short = eligible_classes(graph_set, shot + query)
    if len(eligible) < way:
        raise ValueError(
            f"{way}-way episodes need {way} classes with >= {shot + query} samples, "
            f"found {len(eligible)}; too small: {', '.join(short) or 'none'}")
    classes = rng.choice(eligible, size=way, replace=False)
    s_idx, s_y, q_idx, q_y = [], [], [], []
    for label, c in enumerate(classes):
        idx = rng.permutation(graph_set.class_indices(c))[:shot + query]
        s_idx.append(idx[:shot])
        q_idx.append(idx[shot:])
        s_y.append(np.full(shot, label))
        q_y.append(np.full(query, label))
    return Episode(classes=classes, support_idx=np.concatenate(s_idx),
                   support_y=np.concatenate(s_y), query_idx=np.concatenate(q_idx),
                   query_y=np.concatenate(q_y))
