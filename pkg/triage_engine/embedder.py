#!/usr/bin/env python
# -*- coding:utf-8 -*-
"""Compact convolutional embedder with hand-written backward passes.

Layout: average-pool the graph by INPUT_POOL, then conv blocks
(3x3 same conv, ReLU, 2x2 max pool), flatten, dense hidden layer with
ReLU, dense output layer (the embedding). A separate linear classifier
head maps embeddings to base-class logits during pretraining.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import triage_engine.settings as settings

log = logging.getLogger('triage_engine')

HEAD = 'head'


@dataclass(frozen=True)
class Architecture:
    input_size: int = settings.GRAPH_SIZE
    input_pool: int = settings.INPUT_POOL
    channels: tuple = tuple(settings.CHANNELS)
    hidden: int = settings.HIDDEN_DIM
    embed_dim: int = settings.EMBED_DIM
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, 'channels', tuple(int(c) for c in self.channels))
        if self.final_size < 1:
            raise ValueError(
                f"Input {self.input_size}/{self.input_pool} is too small for "
                f"{len(self.channels)} pooling blocks")

    @property
    def pooled_size(self) -> int:
        return self.input_size // self.input_pool

    @property
    def final_size(self) -> int:
        s = self.pooled_size
        for _ in self.channels:
            s //= 2
        return s

    @property
    def flat_dim(self) -> int:
        return self.channels[-1] * self.final_size ** 2

    @property
    def conv_groups(self) -> tuple:
        return tuple(f'conv{i}' for i in range(len(self.channels)))

    @property
    def feature_groups(self) -> tuple:
        return self.conv_groups + ('fc1', 'fc2')

    @property
    def groups(self) -> tuple:
        return self.feature_groups + (HEAD,)

    def shapes(self) -> dict:
        out = {}
        cin = 1
        for g, cout in zip(self.conv_groups, self.channels):
            out[f'{g}.W'] = (cout, cin, 3, 3)
            out[f'{g}.b'] = (cout,)
            cin = cout
        out['fc1.W'] = (self.hidden, self.flat_dim)
        out['fc1.b'] = (self.hidden,)
        out['fc2.W'] = (self.embed_dim, self.hidden)
        out['fc2.b'] = (self.embed_dim,)
        out[f'{HEAD}.W'] = (self.n_classes, self.embed_dim)
        out[f'{HEAD}.b'] = (self.n_classes,)
        return out

    def reprJSON(self) -> dict:
        return {'input_size': self.input_size, 'input_pool': self.input_pool,
                'channels': list(self.channels), 'hidden': self.hidden,
                'embed_dim': self.embed_dim, 'n_classes': self.n_classes}


@dataclass(frozen=True, eq=False)
class EmbedderParams:
    """Immutable snapshot of every weight. Updates build new snapshots."""
    arch: Architecture
    tensors: dict
    frozen: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        expected = self.arch.shapes()
        if set(expected) != set(self.tensors):
            raise ValueError(f"Tensor names {sorted(self.tensors)} do not match {sorted(expected)}")
        for k, shape in expected.items():
            if self.tensors[k].shape != shape:
                raise ValueError(f"{k}: expected shape {shape}, got {self.tensors[k].shape}")
            self.tensors[k].setflags(write=False)
        unknown = set(self.frozen) - set(self.arch.groups)
        if unknown:
            raise ValueError(f"Unknown frozen groups {sorted(unknown)}")
        object.__setattr__(self, 'frozen', frozenset(self.frozen))

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def trainable_groups(self, include_head: bool = True) -> tuple:
        groups = self.arch.groups if include_head else self.arch.feature_groups
        return tuple(g for g in groups if g not in self.frozen)

    def group_tensors(self, group: str) -> tuple:
        return (f'{group}.W', f'{group}.b')

    def with_tensors(self, updates: dict) -> 'EmbedderParams':
        tensors = dict(self.tensors)
        tensors.update(updates)
        return replace(self, tensors=tensors)

    def with_frozen(self, frozen) -> 'EmbedderParams':
        return replace(self, frozen=frozenset(frozen))

    def with_head(self, n_classes: int, rng: np.random.Generator) -> 'EmbedderParams':
        """Swap the classifier head for a freshly drawn one of n_classes rows."""
        arch = replace(self.arch, n_classes=n_classes)
        tensors = dict(self.tensors)
        tensors[f'{HEAD}.W'] = fan_in_uniform(rng, (n_classes, arch.embed_dim))
        tensors[f'{HEAD}.b'] = np.zeros(n_classes)
        return EmbedderParams(arch=arch, tensors=tensors, frozen=self.frozen)

    def reprJSON(self) -> dict:
        return {'arch': self.arch.reprJSON(), 'frozen': sorted(self.frozen),
                'n_params': int(sum(t.size for t in self.tensors.values()))}


def fan_in_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(arch: Architecture, seed: int, frozen=()) -> EmbedderParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for k, shape in arch.shapes().items():
        if k.endswith('.W'):
            tensors[k] = fan_in_uniform(rng, shape)
        else:
            tensors[k] = np.zeros(shape)
    return EmbedderParams(arch=arch, tensors=tensors, frozen=frozenset(frozen))


def frozen_below(arch: Architecture, trainable_from: str) -> frozenset:
    """Freeze every feature group that comes before trainable_from."""
    groups = arch.feature_groups
    if trainable_from not in groups:
        raise ValueError(f"Unknown group {trainable_from!r}, expected one of {groups}")
    return frozenset(groups[:groups.index(trainable_from)])


# =============================================================================
# LAYERS
# =============================================================================
def pool_input(x: np.ndarray, p: int) -> np.ndarray:
    """(B, H, W) -> (B, 1, H//p, W//p) block average."""
    b, h, w = x.shape
    s = h // p
    xc = x[:, :s * p, :s * p]
    return xc.reshape(b, s, p, s, p).mean(axis=(2, 4))[:, None, :, :]


def conv_forward(a: np.ndarray, W: np.ndarray, b: np.ndarray) -> tuple:
    ap = np.pad(a, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(ap, (3, 3), axis=(2, 3))
    z = np.einsum('bchwij,ocij->bohw', windows, W, optimize=True)
    z += b[None, :, None, None]
    return z, windows


def conv_backward(dz: np.ndarray, windows: np.ndarray, W: np.ndarray,
                  need_dx: bool = True) -> tuple:
    dW = np.einsum('bchwij,bohw->ocij', windows, dz, optimize=True)
    db = dz.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dW, db
    bsz, _, h, w = dz.shape
    dxp = np.zeros((bsz, W.shape[1], h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + w] += np.einsum('bohw,oc->bchw', dz, W[:, :, i, j],
                                                     optimize=True)
    return dxp[:, :, 1:-1, 1:-1], dW, db


def maxpool_forward(r: np.ndarray) -> tuple:
    b, c, h, w = r.shape
    h2, w2 = h // 2, w // 2
    blocks = (r[:, :, :2 * h2, :2 * w2]
              .reshape(b, c, h2, 2, w2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(b, c, h2, w2, 4))
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dout: np.ndarray, idx: np.ndarray, in_shape: tuple) -> np.ndarray:
    b, c, h2, w2 = dout.shape
    d4 = np.zeros((b, c, h2, w2, 4))
    np.put_along_axis(d4, idx[..., None], dout[..., None], axis=-1)
    dr = np.zeros(in_shape)
    dr[:, :, :2 * h2, :2 * w2] = (d4.reshape(b, c, h2, w2, 2, 2)
                                  .transpose(0, 1, 2, 4, 3, 5)
                                  .reshape(b, c, 2 * h2, 2 * w2))
    return dr


# =============================================================================
# NETWORK
# =============================================================================
def forward(params: EmbedderParams, x: np.ndarray, dtype=np.float64) -> tuple:
    """Embeddings (B, d) of a batch of normalized graphs (B, H, W) and the
    cache backward() needs."""
    arch = params.arch
    t = {k: v.astype(dtype, copy=False) for k, v in params.tensors.items()}
    a = pool_input(np.asarray(x, dtype=dtype), arch.input_pool)
    cache = {'blocks': []}
    for g in arch.conv_groups:
        z, windows = conv_forward(a, t[f'{g}.W'], t[f'{g}.b'])
        r = np.maximum(z, 0)
        a, idx = maxpool_forward(r)
        cache['blocks'].append((windows, z, idx))
    flat = a.reshape(a.shape[0], -1)
    u = flat @ t['fc1.W'].T + t['fc1.b']
    hid = np.maximum(u, 0)
    emb = hid @ t['fc2.W'].T + t['fc2.b']
    cache.update({'flat': flat, 'flat_shape': a.shape, 'u': u, 'hid': hid})
    return emb, cache


def backward(params: EmbedderParams, cache: dict, d_emb: np.ndarray, groups=None) -> dict:
    """Gradients of the feature groups given dL/d(embedding). Only groups
    listed are returned and the pass stops once no lower group is needed."""
    arch = params.arch
    groups = set(arch.feature_groups if groups is None else groups) - {HEAD}
    order = arch.feature_groups
    lowest = min((order.index(g) for g in groups), default=len(order))
    grads = {}
    if lowest >= len(order):
        return grads
    W2 = params['fc2.W']
    if 'fc2' in groups:
        grads['fc2.W'] = d_emb.T @ cache['hid']
        grads['fc2.b'] = d_emb.sum(axis=0)
    if lowest > order.index('fc1'):
        return grads
    du = (d_emb @ W2) * (cache['u'] > 0)
    if 'fc1' in groups:
        grads['fc1.W'] = du.T @ cache['flat']
        grads['fc1.b'] = du.sum(axis=0)
    if lowest >= len(arch.conv_groups):
        return grads
    da = (du @ params['fc1.W']).reshape(cache['flat_shape'])
    for i in reversed(range(len(arch.conv_groups))):
        g = arch.conv_groups[i]
        windows, z, idx = cache['blocks'][i]
        dr = maxpool_backward(da, idx, z.shape)
        dz = dr * (z > 0)
        need_dx = i > lowest
        da, dW, db = conv_backward(dz, windows, params[f'{g}.W'], need_dx=need_dx)
        if g in groups:
            grads[f'{g}.W'] = dW
            grads[f'{g}.b'] = db
        if not need_dx:
            break
    return grads


def head_logits(params: EmbedderParams, emb: np.ndarray) -> np.ndarray:
    return emb @ params[f'{HEAD}.W'].T + params[f'{HEAD}.b']


def embed_batch(params: EmbedderParams, x: np.ndarray, batch_size: int = 64,
                float32: bool = False) -> np.ndarray:
    """Embeddings of many graphs, computed in chunks; rows are independent."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    dtype = np.float32 if float32 else np.float64
    out = np.empty((x.shape[0], params.arch.embed_dim), dtype=np.float64)
    for start in range(0, x.shape[0], batch_size):
        emb, _ = forward(params, x[start:start + batch_size], dtype=dtype)
        out[start:start + batch_size] = emb
    return out
