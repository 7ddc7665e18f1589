#!/usr/bin/env python
# -*- coding:utf-8 -*-
"""Triage of new samples against a labelled reference index.

A test embedding retrieves its top-K cosine neighbours. Linear rank weights
(K for the first hit down to 1 for the last) are pooled per class into
weight ratios; the best class wins when its ratio reaches the threshold,
otherwise the sample goes to the risk pool for manual analysis.
"""
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd

import triage_engine.iotasks as iotasks
import triage_engine.settings as settings
from triage_engine.embedder import EmbedderParams, embed_batch
from triage_engine.errors import ZeroNormError
from triage_engine.meta_model import embed

log = logging.getLogger('triage_engine')

RISK_POOL = 'RiskPool'


@dataclass(frozen=True, eq=False)
class ReferenceIndex:
    vectors: np.ndarray
    labels: np.ndarray
    class_names: list
    sample_ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.labels):
            raise ValueError("Index vectors must be (n, d) with one label per row")
        n_names = len(self.class_names)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= n_names):
            raise ValueError("Index labels fall outside the class table")
        self.vectors.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def built(self) -> bool:
        return len(self) > 0


@dataclass(frozen=True)
class NeighborHit:
    rank: int
    row: int
    label: int
    score: float

    def reprJSON(self) -> dict:
        return {'rank': self.rank, 'row': self.row, 'label': self.label, 'score': self.score}


@dataclass(eq=False)
class TriageDecision:
    verdict: object
    ratios: dict
    threshold: float
    hits: tuple = ()
    lime: np.ndarray = None
    sample_id: str = ''
    class_names: list = None

    @property
    def is_risk(self) -> bool:
        return self.verdict == RISK_POOL

    @property
    def verdict_name(self) -> str:
        if self.is_risk or self.class_names is None:
            return str(self.verdict)
        return self.class_names[self.verdict]

    def reprJSON(self) -> dict:
        def name(label):
            return self.class_names[label] if self.class_names else str(label)
        return {
            'sample_id': self.sample_id,
            'verdict': self.verdict_name,
            'threshold': self.threshold,
            'ratios': {name(k): float(v) for k, v in sorted(self.ratios.items())},
            'hits': [{**h.reprJSON(), 'class': name(h.label)} for h in self.hits],
            'lime': None if self.lime is None else [float(x) for x in self.lime],
        }


def unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormError("Zero vector cannot be unit-normalized")
    return x / norms


def build_index(embeddings: np.ndarray, labels, class_names: list = None,
                sample_ids: list = None) -> ReferenceIndex:
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.shape[0] == 0:
        raise ValueError("Cannot build an index from zero embeddings")
    if class_names is None:
        class_names = [str(c) for c in range(int(labels.max()) + 1)]
    return ReferenceIndex(vectors=unit_rows(embeddings), labels=labels.copy(),
                          class_names=list(class_names), sample_ids=list(sample_ids or []))


def index_from_graphs(params: EmbedderParams, graph_set, float32: bool = False) -> ReferenceIndex:
    emb = embed_batch(params, graph_set.X, float32=float32)
    return build_index(emb, graph_set.y, graph_set.class_names, graph_set.sample_ids)


def search(index: ReferenceIndex, query: np.ndarray, k: int = settings.TRIAGE_K) -> tuple:
    """Exact top-k by cosine over every row; equal scores keep row order."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = unit_rows(query)[0]
    scores = np.clip(index.vectors @ q, -1.0, 1.0)
    rows = np.arange(len(scores))
    order = np.lexsort((rows, -scores))[:min(k, len(scores))]
    return tuple(NeighborHit(rank=i + 1, row=int(r), label=int(index.labels[r]),
                             score=float(scores[r])) for i, r in enumerate(order))


def rank_weights(k: int) -> np.ndarray:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return np.arange(k, 0, -1, dtype=np.int64)


def _exact(w) -> Fraction:
    return Fraction(int(w)) if float(w).is_integer() else Fraction(float(w))


def weight_ratio(hits, weights) -> dict:
    """Share of the total weight held by each class present in the hits,
    as exact fractions."""
    if len(hits) != len(weights):
        raise ValueError(f"{len(hits)} hits but {len(weights)} weights")
    if len(hits) == 0:
        return {}
    total = sum(_exact(w) for w in weights)
    out = {}
    for h, w in zip(hits, weights):
        out[h.label] = out.get(h.label, Fraction(0)) + _exact(w)
    return {label: v / total for label, v in out.items()}


# =============================================================================
# SIMPLEX WEIGHTS
# =============================================================================
def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w : w >= 0, sum(w) = 1} by sorting."""
    n = v.shape[0]
    u = np.sort(v)[::-1]
    cssv = np.cumsum(u) - 1
    rho = np.nonzero(u * np.arange(1, n + 1) > cssv)[0][-1]
    theta = cssv[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0)


def lime_objective(d: np.ndarray, neighbors: np.ndarray, target: np.ndarray, lam: float,
                   printed_sign: bool = False) -> float:
    r = neighbors.T @ d - target
    sign = -1.0 if printed_sign else 1.0
    return float(r @ r + sign * lam * (d @ d))


def lime_weights(neighbor_vectors: np.ndarray, test_vector: np.ndarray,
                 lam: float = settings.LIME_LAMBDA, printed_sign: bool = False,
                 tol: float = settings.LIME_TOL,
                 max_iter: int = settings.LIME_MAX_ITER) -> np.ndarray:
    """Simplex weights d reconstructing the test vector from its neighbours,
    minimizing ||X^T d - f||^2 + lam ||d||^2 by projected gradient.
    printed_sign flips the regulariser to -lam ||d||^2."""
    X = np.atleast_2d(np.asarray(neighbor_vectors, dtype=np.float64))
    f = np.asarray(test_vector, dtype=np.float64)
    k = X.shape[0]
    if k == 0 or X.size == 0:
        raise ValueError("lime_weights needs at least one neighbour")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if k == 1:
        return np.ones(1)
    sign = -1.0 if printed_sign else 1.0
    gram = X @ X.T
    lipschitz = 2 * (np.linalg.eigvalsh(gram)[-1] + sign * lam)
    step = 1.0 / lipschitz if lipschitz > 0 else 1.0
    Xf = X @ f
    d = np.full(k, 1.0 / k)
    obj = lime_objective(d, X, f, lam, printed_sign)
    for _ in range(max_iter):
        grad = 2 * (gram @ d - Xf) + 2 * sign * lam * d
        d_new = project_simplex(d - step * grad)
        obj_new = lime_objective(d_new, X, f, lam, printed_sign)
        d, done = d_new, abs(obj - obj_new) <= tol
        obj = obj_new
        if done:
            break
    else:
        log.debug(f"lime_weights stopped at {max_iter} iterations, objective {obj:.3e}")
    return d / d.sum()


def lime_ratios(hits, d: np.ndarray) -> dict:
    out = {}
    for h, w in zip(hits, d):
        out[h.label] = out.get(h.label, 0.0) + float(w)
    return out


# =============================================================================
# DECISIONS
# =============================================================================
def decide(ratios: dict, threshold: float = settings.TRIAGE_THRESHOLD,
           **evidence) -> TriageDecision:
    """Class with the largest ratio (smallest id among equals) when the ratio
    reaches the threshold, the risk pool otherwise."""
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    verdict = RISK_POOL
    if ratios:
        best = max(ratios.values())
        label = min(c for c, v in ratios.items() if v == best)
        if best >= threshold:
            verdict = label
    return TriageDecision(verdict=verdict, ratios=dict(ratios), threshold=threshold, **evidence)


def triage_embedding(index: ReferenceIndex, embedding: np.ndarray, k: int = settings.TRIAGE_K,
                     threshold: float = settings.TRIAGE_THRESHOLD,
                     ratio_source: str = settings.RATIO_SOURCE, lam: float = settings.LIME_LAMBDA,
                     printed_sign: bool = settings.LIME_PRINTED_SIGN,
                     sample_id: str = '') -> TriageDecision:
    if ratio_source not in ('rank', 'lime'):
        raise ValueError(f"ratio_source must be 'rank' or 'lime', got {ratio_source!r}")
    hits = search(index, embedding, k)
    d = lime_weights(index.vectors[[h.row for h in hits]], unit_rows(embedding)[0], lam,
                     printed_sign=printed_sign)
    if ratio_source == 'rank':
        ratios = weight_ratio(hits, rank_weights(len(hits)))
    else:
        ratios = lime_ratios(hits, d)
    return decide(ratios, threshold, hits=hits, lime=d, sample_id=sample_id,
                  class_names=index.class_names)


def triage_sample(params: EmbedderParams, index: ReferenceIndex, graph, float32: bool = False,
                  **kwargs) -> TriageDecision:
    """Verdict for one normalized entropy graph, embedded in the same precision
    as the index was built with."""
    kwargs.setdefault('sample_id', graph.provenance)
    return triage_embedding(index, embed(params, graph, float32=float32), **kwargs)


def sweep_embeddings(index: ReferenceIndex, embeddings: np.ndarray, labels: list,
                     thresholds=settings.SWEEP_THRESHOLDS, k: int = settings.TRIAGE_K,
                     ratio_source: str = settings.RATIO_SOURCE,
                     lam: float = settings.LIME_LAMBDA) -> pd.DataFrame:
    """One row per threshold: share classified, share sent to the risk pool
    and accuracy over the classified samples only. labels are class names;
    names missing from the index can never be classified correctly."""
    if len(embeddings) == 0:
        raise ValueError("Threshold sweep needs at least one test sample")
    decisions = [triage_embedding(index, e, k=k, threshold=1.0, ratio_source=ratio_source, lam=lam)
                 for e in embeddings]
    rows = []
    for t in thresholds:
        verdicts = [decide(dec.ratios, t).verdict for dec in decisions]
        classified = [(v, lab) for v, lab in zip(verdicts, labels) if v != RISK_POOL]
        correct = sum(index.class_names[v] == lab for v, lab in classified)
        n = len(verdicts)
        rows.append({
            'threshold': t,
            'classified_pct': 100 * len(classified) / n,
            'risk_pool_pct': 100 * (n - len(classified)) / n,
            'accuracy_pct': 100 * correct / len(classified) if classified else np.nan,
            'n': n,
        })
    return pd.DataFrame(rows)


def threshold_sweep(params: EmbedderParams, index: ReferenceIndex, test_set,
                    thresholds=settings.SWEEP_THRESHOLDS, k: int = settings.TRIAGE_K,
                    float32: bool = False, **kwargs) -> pd.DataFrame:
    if len(test_set) == 0:
        raise ValueError("Threshold sweep needs at least one test sample")
    emb = embed_batch(params, test_set.X, float32=float32)
    labels = [test_set.class_names[y] for y in test_set.y]
    df = sweep_embeddings(index, emb, labels, thresholds=thresholds, k=k, **kwargs)
    for _, row in df.iterrows():
        log.info(f"threshold {row.threshold:.2f}: classified {row.classified_pct:.1f}%, "
                 f"risk pool {row.risk_pool_pct:.1f}%, accuracy {row.accuracy_pct:.1f}%")
    return df


def save_index(index: ReferenceIndex, fpath: str or Path) -> Path:
    fpath = Path(fpath)
    fpath.parent.mkdir(parents=True, exist_ok=True)
    with open(fpath, 'wb') as f:
        f.write(iotasks.encode_index(index.vectors, index.labels, index.class_names))
    log.info(f"Saved index of {len(index)} references to {fpath}")
    return fpath


def load_index(fpath: str or Path) -> ReferenceIndex:
    """Vectors are stored in 32-bit and re-normalized on load."""
    fpath = Path(fpath)
    if not fpath.exists():
        raise FileNotFoundError(f"Index not found: {fpath}")
    with open(fpath, 'rb') as f:
        vectors, labels, class_names = iotasks.decode_index(f.read(), source=str(fpath))
    return ReferenceIndex(vectors=unit_rows(vectors), labels=labels, class_names=class_names)


def plot_sweep(df: pd.DataFrame, ax=None):
    import matplotlib.pyplot as plt

    if ax is None:
        f = plt.figure(figsize=(8, 5), dpi=80)
        ax = f.add_subplot(1, 1, 1)
    df = df.sort_values('threshold')
    ax.plot(df.threshold, df.classified_pct, 'o-', label='classified')
    ax.plot(df.threshold, df.risk_pool_pct, 's-', label='risk pool')
    ax.plot(df.threshold, df.accuracy_pct, '^-', label='accuracy (classified)')
    ax.set_xlabel('threshold')
    ax.set_ylabel('%')
    ax.set_ylim(0, 100)
    ax.legend(loc='best')
    return ax
