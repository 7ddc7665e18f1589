#!/usr/bin/env python
# -*- coding:utf-8 -*-
"""On-disk formats: entropy graphs (ENTG), embedder checkpoints (EMBD),
reference indices (TIDX), line-delimited JSON reports and CSV dumps."""
import json
import logging
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd

from triage_engine.embedder import Architecture, EmbedderParams
from triage_engine.entropy_features import EntropyGraph

log = logging.getLogger('triage_engine')

GRAPH_MAGIC = b'ENTG'
GRAPH_VERSION = 1
GRAPH_HEADER = struct.Struct('<4sHHHB')
CHECKPOINT_MAGIC = b'EMBD'
CHECKPOINT_VERSION = 1
INDEX_MAGIC = b'TIDX'
INDEX_VERSION = 1
GRAPH_SUFFIX = '.entg'


class ComplexEncoder(json.JSONEncoder):
    def default(self, obj):
        if hasattr(obj, 'reprJSON'):
            return obj.reprJSON()
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, Path):
            return str(obj)
        return json.JSONEncoder.default(self, obj)


def _check_magic(fpath, found: bytes, expected: bytes, version: int, supported: int) -> None:
    if found != expected:
        raise ValueError(f"{fpath}: bad magic {found!r}, expected {expected!r}")
    if version != supported:
        raise ValueError(f"{fpath}: unsupported version {version}, expected {supported}")


@contextmanager
def _truncation_as_value_error(source, kind: str):
    try:
        yield
    except struct.error as e:
        raise ValueError(f"{source or '<bytes>'}: truncated {kind} ({e})") from e


def _frombuffer(blob: bytes, dtype: str, count: int, pos: int) -> np.ndarray:
    needed = pos + np.dtype(dtype).itemsize * count
    if needed > len(blob):
        raise struct.error(f"need {needed} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype=dtype, count=count, offset=pos)


# =============================================================================
# ENTROPY GRAPHS
# =============================================================================
def encode_graph(graph: EntropyGraph) -> bytes:
    h, w = graph.shape
    header = GRAPH_HEADER.pack(GRAPH_MAGIC, GRAPH_VERSION, w, h, int(graph.normalized))
    return header + np.ascontiguousarray(graph.pixels, dtype='<f4').tobytes()


def decode_graph(blob: bytes, provenance: str = '') -> EntropyGraph:
    with _truncation_as_value_error(provenance, 'graph header'):
        magic, version, w, h, normalized = GRAPH_HEADER.unpack_from(blob)
    _check_magic(provenance, magic, GRAPH_MAGIC, version, GRAPH_VERSION)
    expected = GRAPH_HEADER.size + 4 * w * h
    if len(blob) != expected:
        raise ValueError(f"{provenance}: expected {expected} bytes, found {len(blob)}")
    pixels = np.frombuffer(blob, dtype='<f4', offset=GRAPH_HEADER.size).reshape(h, w)
    return EntropyGraph(pixels=pixels.astype(np.float64), normalized=bool(normalized),
                        provenance=provenance)


def write_graph(graph: EntropyGraph, fpath: str or Path) -> Path:
    fpath = Path(fpath)
    fpath.parent.mkdir(parents=True, exist_ok=True)
    with open(fpath, 'wb') as f:
        f.write(encode_graph(graph))
    return fpath


def read_graph(fpath: str or Path) -> EntropyGraph:
    fpath = Path(fpath)
    with open(fpath, 'rb') as f:
        blob = f.read()
    return decode_graph(blob, provenance=str(fpath))


def is_graph_file(fpath: str or Path) -> bool:
    return Path(fpath).suffix == GRAPH_SUFFIX


# =============================================================================
# CHECKPOINTS
# =============================================================================
def _pack_str(s: str) -> bytes:
    b = s.encode('utf-8')
    return struct.pack('<H', len(b)) + b


def _unpack_str(blob: bytes, pos: int) -> tuple:
    (n,) = struct.unpack_from('<H', blob, pos)
    pos += 2
    if pos + n > len(blob):
        raise struct.error(f"string of {n} bytes runs past the end")
    return blob[pos:pos + n].decode('utf-8'), pos + n


def encode_checkpoint(params: EmbedderParams) -> bytes:
    """EMBD, version, architecture, frozen groups, then every tensor as
    name, ndim, shape and little-endian float64 values."""
    arch = params.arch
    out = [CHECKPOINT_MAGIC, struct.pack('<H', CHECKPOINT_VERSION)]
    out.append(struct.pack('<IIB', arch.input_size, arch.input_pool, len(arch.channels)))
    out.append(struct.pack(f'<{len(arch.channels)}I', *arch.channels))
    out.append(struct.pack('<III', arch.hidden, arch.embed_dim, arch.n_classes))
    groups = arch.groups
    out.append(struct.pack('<B', len(groups)))
    for g in groups:
        out.append(_pack_str(g))
        out.append(struct.pack('<B', int(g in params.frozen)))
    names = sorted(params.tensors)
    out.append(struct.pack('<H', len(names)))
    for name in names:
        t = params.tensors[name]
        out.append(_pack_str(name))
        out.append(struct.pack('<B', t.ndim))
        out.append(struct.pack(f'<{t.ndim}I', *t.shape))
        out.append(np.ascontiguousarray(t, dtype='<f8').tobytes())
    return b''.join(out)


def decode_checkpoint(blob: bytes, source: str = '') -> EmbedderParams:
    with _truncation_as_value_error(source, 'checkpoint'):
        (version,) = struct.unpack_from('<H', blob, 4)
    _check_magic(source, blob[:4], CHECKPOINT_MAGIC, version, CHECKPOINT_VERSION)
    with _truncation_as_value_error(source, 'checkpoint'):
        arch, frozen, tensors, pos = _unpack_checkpoint(blob)
    if pos != len(blob):
        raise ValueError(f"{source}: {len(blob) - pos} trailing bytes in checkpoint")
    return EmbedderParams(arch=arch, tensors=tensors, frozen=frozenset(frozen))


def _unpack_checkpoint(blob: bytes) -> tuple:
    pos = 6
    input_size, input_pool, nblocks = struct.unpack_from('<IIB', blob, pos)
    pos += 9
    channels = struct.unpack_from(f'<{nblocks}I', blob, pos)
    pos += 4 * nblocks
    hidden, embed_dim, n_classes = struct.unpack_from('<III', blob, pos)
    pos += 12
    arch = Architecture(input_size=input_size, input_pool=input_pool, channels=tuple(channels),
                        hidden=hidden, embed_dim=embed_dim, n_classes=n_classes)
    (ngroups,) = struct.unpack_from('<B', blob, pos)
    pos += 1
    frozen = set()
    for _ in range(ngroups):
        g, pos = _unpack_str(blob, pos)
        (flag,) = struct.unpack_from('<B', blob, pos)
        pos += 1
        if flag:
            frozen.add(g)
    (ntensors,) = struct.unpack_from('<H', blob, pos)
    pos += 2
    tensors = {}
    for _ in range(ntensors):
        name, pos = _unpack_str(blob, pos)
        (ndim,) = struct.unpack_from('<B', blob, pos)
        pos += 1
        shape = struct.unpack_from(f'<{ndim}I', blob, pos)
        pos += 4 * ndim
        count = int(np.prod(shape))
        tensors[name] = _frombuffer(blob, '<f8', count, pos).reshape(shape).copy()
        pos += 8 * count
    return arch, frozen, tensors, pos


def save_checkpoint(params: EmbedderParams, fpath: str or Path) -> Path:
    fpath = Path(fpath)
    fpath.parent.mkdir(parents=True, exist_ok=True)
    with open(fpath, 'wb') as f:
        f.write(encode_checkpoint(params))
    log.info(f"Saved checkpoint {fpath}")
    return fpath


def load_checkpoint(fpath: str or Path) -> EmbedderParams:
    fpath = Path(fpath)
    if not fpath.exists():
        raise FileNotFoundError(f"Checkpoint not found: {fpath}")
    with open(fpath, 'rb') as f:
        blob = f.read()
    return decode_checkpoint(blob, source=str(fpath))


# =============================================================================
# REFERENCE INDEX
# =============================================================================
def encode_index(vectors: np.ndarray, label_ids: np.ndarray, class_names: list) -> bytes:
    n, d = vectors.shape
    out = [INDEX_MAGIC, struct.pack('<HII', INDEX_VERSION, n, d)]
    out.append(struct.pack('<I', len(class_names)))
    for name in class_names:
        out.append(_pack_str(name))
    out.append(np.ascontiguousarray(vectors, dtype='<f4').tobytes())
    out.append(np.ascontiguousarray(label_ids, dtype='<u4').tobytes())
    return b''.join(out)


def decode_index(blob: bytes, source: str = '') -> tuple:
    with _truncation_as_value_error(source, 'index'):
        version, n, d = struct.unpack_from('<HII', blob, 4)
    _check_magic(source, blob[:4], INDEX_MAGIC, version, INDEX_VERSION)
    with _truncation_as_value_error(source, 'index'):
        pos = 14
        (nclasses,) = struct.unpack_from('<I', blob, pos)
        pos += 4
        class_names = []
        for _ in range(nclasses):
            name, pos = _unpack_str(blob, pos)
            class_names.append(name)
        vectors = _frombuffer(blob, '<f4', n * d, pos).reshape(n, d)
        pos += 4 * n * d
        label_ids = _frombuffer(blob, '<u4', n, pos)
        pos += 4 * n
    if pos != len(blob):
        raise ValueError(f"{source}: {len(blob) - pos} trailing bytes in index")
    return vectors.astype(np.float64), label_ids.astype(np.int64), class_names


# =============================================================================
# REPORTS AND DUMPS
# =============================================================================
def write_jsonable(records, fpath: str or Path) -> Path:
    """One JSON document per line."""
    fpath = Path(fpath)
    fpath.parent.mkdir(parents=True, exist_ok=True)
    with open(fpath, 'w') as f:
        for rec in records:
            f.write(json.dumps(rec, cls=ComplexEncoder, sort_keys=True))
            f.write('\n')
    return fpath


def load_jsonable(fpath: str or Path) -> list:
    with open(fpath, 'r') as f:
        return [json.loads(line) for line in f if line.strip()]


def write_json(data, fpath: str or Path) -> Path:
    fpath = Path(fpath)
    fpath.parent.mkdir(parents=True, exist_ok=True)
    with open(fpath, 'w') as f:
        f.write(json.dumps(data, cls=ComplexEncoder, indent=1, sort_keys=True))
        f.write('\n')
    return fpath


def embeddings_frame(sample_ids: list, class_ids, vectors: np.ndarray) -> pd.DataFrame:
    df = pd.DataFrame(np.asarray(vectors), columns=[f'v{i}' for i in range(vectors.shape[1])])
    df.insert(0, 'class_id', np.asarray(class_ids))
    df.insert(0, 'sample_id', list(sample_ids))
    return df


def dump_embeddings(sample_ids: list, class_ids, vectors: np.ndarray,
                    fpath: str or Path) -> Path:
    """CSV rows sample_id,class_id,v0..v{d-1} for external plotting."""
    fpath = Path(fpath)
    fpath.parent.mkdir(parents=True, exist_ok=True)
    embeddings_frame(sample_ids, class_ids, vectors).to_csv(fpath, index=False, float_format='%.9g')
    log.info(f"Dumped {len(sample_ids)} embeddings to {fpath}")
    return fpath
