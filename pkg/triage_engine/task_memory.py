#!/usr/bin/env python
# -*- coding:utf-8 -*-
"""External task memory.

One slot per support class holds the mean support embedding. Features read
the memory through softmax(tanh(cosine)) attention and are blended with the
retrieved vector. A class mean attends for its own class; a query is blended
with the adaptive prototype of every candidate class in turn. Everything
here is plain array arithmetic on values, so no gradient ever flows through
memory contents.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from triage_engine.errors import ZeroNormError

log = logging.getLogger('triage_engine')

QUERY_BLENDS = ('class', 'readout')


@dataclass(frozen=True, eq=False)
class MemorySlot:
    class_id: int
    vector: np.ndarray
    support_count: int

    def __post_init__(self):
        if self.support_count < 1:
            raise ValueError(f"Slot {self.class_id} needs at least one support item")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"Slot {self.class_id} holds non-finite values")
        self.vector.setflags(write=False)


@dataclass(frozen=True, eq=False)
class TaskMemory:
    slots: tuple

    def __post_init__(self):
        if not self.slots:
            raise ValueError("Task memory needs at least one slot")
        ids = [s.class_id for s in self.slots]
        if len(set(ids)) != len(ids):
            raise ValueError(f"Duplicate class ids in task memory: {ids}")

    @property
    def size(self) -> int:
        return len(self.slots)

    @property
    def class_ids(self) -> list:
        return [s.class_id for s in self.slots]

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([s.vector for s in self.slots])

    def slot(self, class_id: int) -> MemorySlot:
        for s in self.slots:
            if s.class_id == class_id:
                return s
        raise KeyError(class_id)

    def extended(self, extra_slots) -> 'TaskMemory':
        return TaskMemory(slots=tuple(self.slots) + tuple(extra_slots))


@dataclass(frozen=True, eq=False)
class AdaptedFeature:
    h: np.ndarray
    source: str
    tau: float


def class_mean(embeddings: np.ndarray, class_id: int = 0) -> MemorySlot:
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if embeddings.shape[0] == 0 or embeddings.size == 0:
        raise ValueError(f"Class {class_id} has no embeddings")
    return MemorySlot(class_id=class_id, vector=embeddings.mean(axis=0),
                      support_count=embeddings.shape[0])


def build_memory(embeddings: np.ndarray, labels: np.ndarray) -> TaskMemory:
    """One slot per distinct label, in ascending label order."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    slots = tuple(class_mean(embeddings[labels == c], class_id=int(c))
                  for c in np.unique(labels))
    return TaskMemory(slots=slots)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroNormError("Cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def attention_weights(x_embedding: np.ndarray, memory: TaskMemory) -> np.ndarray:
    sims = np.array([cosine_similarity(x_embedding, s.vector) for s in memory.slots])
    return softmax(np.tanh(sims))


def adaptive_prototype(a: np.ndarray, memory: TaskMemory) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (memory.size,):
        raise ValueError(f"Got {a.shape[0] if a.ndim else 0} weights for {memory.size} slots")
    return a @ memory.matrix


def blend(v_m: np.ndarray, f_x: np.ndarray, tau: float, source: str = 'query') -> AdaptedFeature:
    if not 0 <= tau <= 1:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    h = tau * np.asarray(v_m) + (1 - tau) * np.asarray(f_x)
    return AdaptedFeature(h=h, source=source, tau=tau)


def read_memory(x: np.ndarray, memory: TaskMemory) -> np.ndarray:
    """Adaptive prototype for every row of x."""
    return np.stack([adaptive_prototype(attention_weights(row, memory), memory)
                     for row in np.atleast_2d(x)])


def adapt(x: np.ndarray, memory: TaskMemory, tau: float, source: str = 'query') -> tuple:
    """Blend rows of x with their own memory readout. Returns (h, readout) so
    callers can keep the readout as a constant."""
    if not 0 <= tau <= 1:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    x = np.atleast_2d(x)
    if tau == 0:
        return x.copy(), np.zeros_like(x)
    readout = read_memory(x, memory)
    h = np.stack([blend(v_m, f_x, tau, source=source).h for v_m, f_x in zip(readout, x)])
    return h, readout


def blend_per_class(f_query: np.ndarray, class_readouts: np.ndarray, tau: float) -> np.ndarray:
    """Blend every query with the adaptive prototype of every candidate class.

    :param f_query: raw query embeddings (n, d)
    :param class_readouts: adaptive prototype of each class (c, d)
    :return: h[q, c] = tau * v_m[c] + (1 - tau) * f[q], shape (n, c, d)
    """
    f_query = np.atleast_2d(f_query)
    class_readouts = np.atleast_2d(class_readouts)
    return np.stack([np.stack([blend(v_m, f_x, tau).h for v_m in class_readouts])
                     for f_x in f_query])


def predict_distribution(h_query: np.ndarray, class_prototypes: np.ndarray) -> np.ndarray:
    """softmax over classes of minus squared Euclidean distance. Accepts a
    single query (d,), a batch (n, d), or a batch already blended once per
    candidate class (n, c, d)."""
    protos = np.asarray(class_prototypes, dtype=np.float64)
    if protos.shape[0] < 2:
        raise ValueError("A distribution needs at least two class prototypes")
    if np.ndim(h_query) == 3:
        if h_query.shape[1] != protos.shape[0]:
            raise ValueError(f"Queries blended for {h_query.shape[1]} classes, "
                             f"got {protos.shape[0]} prototypes")
        diff = h_query - protos[None, :, :]
        return softmax(-np.einsum('qcd,qcd->qc', diff, diff), axis=1)
    q = np.atleast_2d(h_query)
    out = softmax(-squared_distances(q, protos), axis=1)
    return out[0] if np.ndim(h_query) == 1 else out


def squared_distances(q: np.ndarray, protos: np.ndarray) -> np.ndarray:
    diff = q[:, None, :] - protos[None, :, :]
    return np.einsum('qcd,qcd->qc', diff, diff)


def prototypes_from_memory(memory: TaskMemory, tau: float, class_ids=None) -> tuple:
    """Blended prototypes of the given classes (default: every slot). The
    class's own mean is the attending feature. Returns (h_c, readouts, means)."""
    class_ids = memory.class_ids if class_ids is None else list(class_ids)
    means = np.stack([memory.slot(c).vector for c in class_ids])
    h, readout = adapt(means, memory, tau, source='prototype')
    return h, readout, means
