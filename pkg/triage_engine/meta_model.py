#!/usr/bin/env python
# -*- coding:utf-8 -*-
"""Three-stage training of the embedder and few-shot evaluation.

1. pretrain_base: cross-entropy over base classes, every group trainable.
2. episodic_train: early groups frozen, episode loss over memory-blended
   prototypes, adaptive-moment updates of what is left.
3. meta_test: head discarded, queries classified by the blended-prototype
   distribution (or by a first-order adapted linear head).
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

import triage_engine.settings as settings
import triage_engine.task_memory as tm
from triage_engine.dataset import GraphSet, eligible_classes, sample_episode
from triage_engine.embedder import (HEAD, Architecture, EmbedderParams, backward, embed_batch,
                                    forward, frozen_below, head_logits, init_params)
from triage_engine.entropy_features import EntropyGraph
from triage_engine.errors import GraphStateError

log = logging.getLogger('triage_engine')

Z95 = 1.96


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = settings.LEARNING_RATE
    task_rate: float = settings.TASK_RATE
    batch_size: int = settings.BATCH_SIZE
    epochs: int = settings.EPOCHS
    episodes: int = settings.EPISODES
    seed: int = 0
    tau: float = settings.TAU
    query_blend: str = settings.QUERY_BLEND
    embed_dim: int = settings.EMBED_DIM
    hidden: int = settings.HIDDEN_DIM
    channels: tuple = tuple(settings.CHANNELS)
    input_pool: int = settings.INPUT_POOL
    graph_size: int = settings.GRAPH_SIZE
    way: int = settings.WAY
    shot: int = settings.SHOT
    query: int = settings.QUERY_1SHOT
    trainable_from: str = settings.TRAINABLE_FROM
    beta1: float = settings.ADAM_BETA1
    beta2: float = settings.ADAM_BETA2
    eps: float = settings.ADAM_EPS
    float32: bool = settings.INFERENCE_FLOAT32

    def __post_init__(self):
        object.__setattr__(self, 'channels', tuple(self.channels))
        for name in ('learning_rate', 'task_rate'):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.episodes < 0:
            raise ValueError("epochs and episodes cannot be negative")
        if not 0 <= self.tau <= 1:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.query_blend not in tm.QUERY_BLENDS:
            raise ValueError(f"Unknown query blend {self.query_blend!r}")

    @classmethod
    def from_params(cls, ph, shot: int = None) -> 'TrainConfig':
        shot = ph.SHOT if shot is None else shot
        return cls(learning_rate=ph.LEARNING_RATE, task_rate=ph.TASK_RATE,
                   batch_size=ph.BATCH_SIZE, epochs=ph.EPOCHS, episodes=ph.EPISODES,
                   seed=ph.SEED, tau=ph.TAU, query_blend=ph.QUERY_BLEND, embed_dim=ph.EMBED_DIM,
                   hidden=ph.HIDDEN_DIM, channels=tuple(ph.CHANNELS), input_pool=ph.INPUT_POOL,
                   graph_size=ph.GRAPH_SIZE, way=ph.WAY, shot=shot,
                   query=ph.query_count(shot), trainable_from=ph.TRAINABLE_FROM,
                   beta1=ph.ADAM_BETA1, beta2=ph.ADAM_BETA2, eps=ph.ADAM_EPS,
                   float32=ph.INFERENCE_FLOAT32)

    def architecture(self, n_classes: int = 2) -> Architecture:
        return Architecture(input_size=self.graph_size, input_pool=self.input_pool,
                            channels=self.channels, hidden=self.hidden,
                            embed_dim=self.embed_dim, n_classes=n_classes)


def init_embedder(config: TrainConfig, n_classes: int = 2) -> EmbedderParams:
    return init_params(config.architecture(n_classes), seed=config.seed)


def freeze_mask_for(arch: Architecture, trainable_from: str = settings.TRAINABLE_FROM) -> frozenset:
    """Groups held fixed during episodic training: everything before
    trainable_from, and the classifier head."""
    return frozen_below(arch, trainable_from) | {HEAD}


def embed(params: EmbedderParams, graph: EntropyGraph, float32: bool = False) -> np.ndarray:
    if not graph.normalized:
        raise GraphStateError(f"Graph {graph.provenance!r} must be normalized before embedding")
    return embed_batch(params, graph.pixels[None], float32=float32)[0]


class Adam(object):
    """Adaptive-moment updates over named tensors; each step returns a new
    parameter snapshot."""

    def __init__(self, lr: float, beta1: float = settings.ADAM_BETA1,
                 beta2: float = settings.ADAM_BETA2, eps: float = settings.ADAM_EPS):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: EmbedderParams, grads: dict) -> EmbedderParams:
        self.t += 1
        updates = {}
        for k, g in grads.items():
            m = self.beta1 * self.m.get(k, 0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0) + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            updates[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params.with_tensors(updates)


# =============================================================================
# LOSSES
# =============================================================================
def cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple:
    """Mean cross-entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    loss = -float(np.mean(logp[np.arange(n), y]))
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1
    return loss, dlogits / n


def classification_loss(params: EmbedderParams, X: np.ndarray, y: np.ndarray,
                        groups=None) -> tuple:
    """Base-class cross-entropy of the embedder plus head, and the
    gradients of the requested groups (default: every group)."""
    groups = params.arch.groups if groups is None else tuple(groups)
    emb, cache = forward(params, X)
    loss, dlogits = cross_entropy(head_logits(params, emb), np.asarray(y))
    grads = {}
    if HEAD in groups:
        grads[f'{HEAD}.W'] = dlogits.T @ emb
        grads[f'{HEAD}.b'] = dlogits.sum(axis=0)
    feature_groups = [g for g in groups if g != HEAD]
    if feature_groups:
        d_emb = dlogits @ params[f'{HEAD}.W']
        grads.update(backward(params, cache, d_emb, groups=feature_groups))
    return loss, grads


def _class_average(y: np.ndarray, n_classes: int) -> np.ndarray:
    A = np.zeros((n_classes, len(y)))
    A[y, np.arange(len(y))] = 1
    return A / A.sum(axis=1, keepdims=True)


def episode_loss(params: EmbedderParams, X_support: np.ndarray, y_support: np.ndarray,
                 X_query: np.ndarray, y_query: np.ndarray, tau: float, groups=None,
                 readouts: tuple = None, query_blend: str = settings.QUERY_BLEND) -> tuple:
    """Query cross-entropy under softmax(-squared distance) to the blended
    class prototypes.

    Prototypes are h_c = tau * R(mu_c) + (1 - tau) * mu_c, where R reads the
    task memory built from the support means mu_c. With query_blend 'class'
    query q is compared to class c as h_qc = tau * R(mu_c) + (1 - tau) * f(q);
    with 'readout' it uses its own readout, h_q = tau * R(f(q)) + (1 - tau) * f(q).
    Readouts are constants: gradients only flow through the raw embedding
    terms. Pass readouts to evaluate the loss with memory contents held fixed.

    :return: (loss, grads, aux) with aux holding 'readouts' and 'accuracy'
    """
    if query_blend not in tm.QUERY_BLENDS:
        raise ValueError(f"Unknown query blend {query_blend!r}")
    groups = params.trainable_groups(include_head=False) if groups is None else tuple(groups)
    y_support = np.asarray(y_support)
    y_query = np.asarray(y_query)
    n_ways = int(y_support.max()) + 1
    ns = len(y_support)
    emb, cache = forward(params, np.concatenate([X_support, X_query]))
    s_emb, q_emb = emb[:ns], emb[ns:]
    A = _class_average(y_support, n_ways)
    means = A @ s_emb
    if readouts is None:
        memory = tm.build_memory(s_emb, y_support)
        _, r_proto = tm.adapt(means, memory, tau)
        r_query = tm.adapt(q_emb, memory, tau)[1] if query_blend == 'readout' else None
        readouts = (r_proto, r_query)
    r_proto, r_query = readouts
    h_c = tau * r_proto + (1 - tau) * means
    if query_blend == 'class':
        h_q = tau * r_proto[None, :, :] + (1 - tau) * q_emb[:, None, :]
    else:
        h_q = (tau * r_query + (1 - tau) * q_emb)[:, None, :]
    # (q, c, d)
    diff = h_q - h_c[None, :, :]
    dist = np.einsum('qcd,qcd->qc', diff, diff)
    loss, dlogits = cross_entropy(-dist, y_query)
    d_dist = -dlogits
    dh_q = 2 * np.einsum('qc,qcd->qd', d_dist, diff)
    dh_c = -2 * np.einsum('qc,qcd->cd', d_dist, diff)
    d_emb = np.concatenate([A.T @ ((1 - tau) * dh_c), (1 - tau) * dh_q])
    grads = backward(params, cache, d_emb, groups=groups) if groups else {}
    accuracy = float(np.mean(np.argmin(dist, axis=1) == y_query))
    return loss, grads, {'readouts': readouts, 'accuracy': accuracy}


# =============================================================================
# STAGE 1: BASE PRETRAINING
# =============================================================================
def check_base_set(graph_set: GraphSet) -> None:
    counts = np.bincount(graph_set.y, minlength=graph_set.n_classes)
    if graph_set.n_classes < 2:
        raise ValueError(f"Pretraining needs at least 2 classes, got {graph_set.n_classes}")
    small = [graph_set.class_names[i] for i in np.flatnonzero(counts < 2)]
    if small:
        raise ValueError(f"Pretraining needs >= 2 samples per class: {', '.join(small)}")


def pretrain_base(params: EmbedderParams, base_set: GraphSet, config: TrainConfig) -> tuple:
    """Joint minibatch training of the feature groups and the head.

    :return: (params, per-epoch mean loss)
    """
    check_base_set(base_set)
    rng = np.random.default_rng(config.seed)
    if params.arch.n_classes != base_set.n_classes:
        params = params.with_head(base_set.n_classes, rng)
    groups = params.trainable_groups(include_head=True)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    losses = []
    t0 = time.time()
    for epoch in range(config.epochs):
        order = rng.permutation(len(base_set))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = classification_loss(params, base_set.X[idx], base_set.y[idx], groups)
            params = opt.step(params, grads)
            batch_losses.append(loss * len(idx))
        losses.append(float(np.sum(batch_losses) / len(order)))
        log.info(f"Pretrain epoch {epoch + 1}/{config.epochs}: loss {losses[-1]:.4f} "
                 f"({time.time() - t0:.1f}s)")
    return params, losses


def classification_accuracy(params: EmbedderParams, graph_set: GraphSet) -> float:
    emb = embed_batch(params, graph_set.X)
    return float(np.mean(np.argmax(head_logits(params, emb), axis=1) == graph_set.y))


# =============================================================================
# LINEAR HEAD ADAPTATION
# =============================================================================
def head_loss(theta: dict, embeddings: np.ndarray, labels: np.ndarray) -> tuple:
    logits = embeddings @ theta['W'].T + theta['b']
    loss, dlogits = cross_entropy(logits, np.asarray(labels))
    return loss, {'W': dlogits.T @ embeddings, 'b': dlogits.sum(axis=0)}


def inner_update(theta: dict, embeddings: np.ndarray, labels: np.ndarray, alpha: float) -> dict:
    """One first-order step of the head on the support set."""
    if len(labels) == 0:
        raise ValueError("inner_update needs a non-empty support set")
    _, grads = head_loss(theta, embeddings, labels)
    return {k: theta[k] - alpha * grads[k] for k in ('W', 'b')}


def prototype_head(prototypes: np.ndarray) -> dict:
    """Linear head whose logits rank classes like minus the squared
    Euclidean distance to each prototype."""
    c = np.asarray(prototypes, dtype=np.float64)
    return {'W': 2 * c, 'b': -np.einsum('cd,cd->c', c, c)}


# =============================================================================
# STAGE 2: EPISODIC TRAINING
# =============================================================================
def episodic_train(params: EmbedderParams, base_set: GraphSet, config: TrainConfig,
                   log_every: int = None) -> tuple:
    """Episode-loss training of the groups left unfrozen.

    :return: (params, per-episode loss)
    """
    if base_set.n_classes < config.way:
        raise ValueError(f"{config.way}-way episodes need {config.way} classes, "
                         f"the base set has {base_set.n_classes}")
    params = params.with_frozen(freeze_mask_for(params.arch, config.trainable_from))
    groups = params.trainable_groups(include_head=False)
    log.info(f"Episodic training of {', '.join(groups)} for {config.episodes} episodes")
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    log_every = log_every or max(1, config.episodes // 10)
    losses, accuracies = [], []
    t0 = time.time()
    for i in range(config.episodes):
        ep = sample_episode(base_set, config.way, config.shot, config.query, rng)
        loss, grads, aux = episode_loss(
            params, base_set.X[ep.support_idx], ep.support_y,
            base_set.X[ep.query_idx], ep.query_y, config.tau, groups=groups,
            query_blend=config.query_blend)
        params = opt.step(params, grads)
        losses.append(loss)
        accuracies.append(aux['accuracy'])
        if (i + 1) % log_every == 0:
            log.info(f"Episode {i + 1}/{config.episodes}: loss {np.mean(losses[-log_every:]):.4f}, "
                     f"query acc {np.mean(accuracies[-log_every:]):.3f} ({time.time() - t0:.1f}s)")
    return params, losses


# =============================================================================
# STAGE 3: META-TEST
# =============================================================================
@dataclass(eq=False)
class MetaTestResult:
    way: int
    shot: int
    query: int
    accuracies: np.ndarray
    seed: int
    excluded: list = field(default_factory=list)

    @property
    def episodes(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def ci95(self) -> float:
        if self.episodes < 2:
            return 0.0
        return float(Z95 * np.std(self.accuracies, ddof=1) / np.sqrt(self.episodes))

    @property
    def degenerate(self) -> bool:
        return self.episodes < 2

    def reprJSON(self) -> dict:
        return {'way': self.way, 'shot': self.shot, 'query': self.query,
                'episodes': self.episodes, 'mean': self.mean, 'ci95': self.ci95,
                'degenerate_ci': self.degenerate, 'seed': self.seed, 'excluded': self.excluded}


def memory_predict(s_emb: np.ndarray, s_y: np.ndarray, q_emb: np.ndarray, tau: float,
                   extra_slots=(), query_blend: str = settings.QUERY_BLEND) -> np.ndarray:
    """Class probabilities of each query against memory-blended prototypes."""
    if query_blend not in tm.QUERY_BLENDS:
        raise ValueError(f"Unknown query blend {query_blend!r}")
    memory = tm.build_memory(s_emb, s_y)
    if extra_slots:
        memory = memory.extended(extra_slots)
    class_ids = sorted(int(c) for c in np.unique(s_y))
    h_c, r_proto, _ = tm.prototypes_from_memory(memory, tau, class_ids)
    if query_blend == 'class':
        h_q = tm.blend_per_class(q_emb, r_proto, tau)
    else:
        h_q, _ = tm.adapt(q_emb, memory, tau)
    return tm.predict_distribution(h_q, h_c)


def head_predict(s_emb: np.ndarray, s_y: np.ndarray, q_emb: np.ndarray, steps: int,
                 alpha: float) -> np.ndarray:
    memory = tm.build_memory(s_emb, s_y)
    theta = prototype_head(memory.matrix)
    for _ in range(steps):
        theta = inner_update(theta, s_emb, s_y, alpha)
    return softmax(q_emb @ theta['W'].T + theta['b'], axis=1)


def base_slots(params: EmbedderParams, base_set: GraphSet) -> tuple:
    """Base-class mean slots with negative class ids, kept apart from the
    0..way-1 ids of an episode."""
    emb = embed_batch(params, base_set.X)
    return tuple(tm.MemorySlot(class_id=-(c + 1), vector=emb[base_set.y == c].mean(axis=0),
                               support_count=int(np.sum(base_set.y == c)))
                 for c in range(base_set.n_classes))


def meta_test_embeddings(embedded: GraphSet, way: int, shot: int, episodes: int, seed: int,
                         query: int = None, tau: float = settings.TAU,
                         classifier: str = settings.CLASSIFIER, inner_steps: int = 0,
                         task_rate: float = settings.TASK_RATE, extra_slots=(),
                         workers: int = 1,
                         query_blend: str = settings.QUERY_BLEND) -> MetaTestResult:
    """Episode accuracies over precomputed embeddings (rows of embedded.X).
    Episode i draws from its own generator spawned from seed, so results do
    not depend on the number of workers."""
    if way < 2:
        raise ValueError(f"way must be >= 2, got {way}")
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    if classifier not in ('memory', 'head'):
        raise ValueError(f"Unknown classifier {classifier!r}")
    if query is None:
        query = settings.QUERY_1SHOT if shot == 1 else settings.QUERY_5SHOT
    seeds = np.random.SeedSequence(seed).spawn(episodes)
    extra = tuple(extra_slots) if shot == 1 else ()

    def run_episode(i: int) -> float:
        ep = sample_episode(embedded, way, shot, query, np.random.default_rng(seeds[i]))
        s_emb, q_emb = embedded.X[ep.support_idx], embedded.X[ep.query_idx]
        if classifier == 'memory':
            p = memory_predict(s_emb, ep.support_y, q_emb, tau, extra, query_blend)
        else:
            p = head_predict(s_emb, ep.support_y, q_emb, inner_steps, task_rate)
        return float(np.mean(np.argmax(p, axis=1) == ep.query_y))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            accuracies = list(executor.map(run_episode, range(episodes)))
    else:
        accuracies = [run_episode(i) for i in range(episodes)]
    _, excluded = eligible_classes(embedded, shot + query)
    return MetaTestResult(way=way, shot=shot, query=query, accuracies=np.array(accuracies),
                          seed=seed, excluded=excluded)


def meta_test(params: EmbedderParams, novel_set: GraphSet, way: int, shot: int, episodes: int,
              seed: int, query: int = None, tau: float = settings.TAU,
              classifier: str = settings.CLASSIFIER, inner_steps: int = 0,
              task_rate: float = settings.TASK_RATE, base_set: GraphSet = None,
              workers: int = 1, float32: bool = False,
              query_blend: str = settings.QUERY_BLEND) -> MetaTestResult:
    """Few-shot accuracy on novel classes with the classifier head dropped.
    Every graph is embedded once, episodes then index into the embeddings.
    A base_set adds base-class slots to the memory of 1-shot tasks."""
    if way > novel_set.n_classes:
        raise ValueError(f"{way}-way evaluation needs {way} classes, "
                         f"the novel set has {novel_set.n_classes}")
    emb = embed_batch(params, novel_set.X, float32=float32)
    embedded = GraphSet(X=emb, y=novel_set.y, class_names=list(novel_set.class_names),
                        sample_ids=list(novel_set.sample_ids))
    extra = base_slots(params, base_set) if base_set is not None and shot == 1 else ()
    result = meta_test_embeddings(embedded, way, shot, episodes, seed, query=query, tau=tau,
                                  classifier=classifier, inner_steps=inner_steps,
                                  task_rate=task_rate, extra_slots=extra, workers=workers,
                                  query_blend=query_blend)
    log.info(f"{way}-way {shot}-shot: {100 * result.mean:.1f} +- {100 * result.ci95:.1f}% "
             f"over {result.episodes} episodes")
    return result
