"""Full pipeline on the synthetic corpus: pretrain, episodic training,
meta-test and the triage threshold sweep. Run with `pytest -m slow`."""
from fractions import Fraction

import numpy as np
import pytest

import triage_engine.iotasks as iotasks
from triage_engine.dataset import GraphSet, SynthSpec, synth_dataset
from triage_engine.embedder import embed_batch
from triage_engine.evaluation import load_splits
from triage_engine.meta_model import (TrainConfig, episodic_train, init_embedder, meta_test,
                                      meta_test_embeddings, pretrain_base)
from triage_engine.params import ParamHandler
from triage_engine.triage import index_from_graphs, threshold_sweep, triage_embedding

pytestmark = pytest.mark.slow

DESK = {'seed': 0, 'graph_size': 64, 'input_pool': 2, 'channels': [8, 16, 16],
        'hidden_dim': 64, 'embed_dim': 32, 'trainable_from': 'conv2', 'epochs': 50,
        'episodes': 500, 'way': 5, 'shot': 1}
CORPUS = SynthSpec(n_classes=10, samples_per_class=40, seed=0)
REFS_PER_CLASS = 6  # fewer than the 20 neighbours, so neighbour lists always mix classes


@pytest.fixture(scope='module')
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp('corpus')
    synth_dataset(CORPUS, root)
    return root


@pytest.fixture(scope='module')
def splits(corpus):
    _, base_set, novel_set = load_splits(corpus, ParamHandler(overrides=DESK))
    return base_set, novel_set


@pytest.fixture(scope='module')
def trained(splits):
    base_set, _ = splits
    config = TrainConfig.from_params(ParamHandler(overrides=DESK))
    params = init_embedder(config, n_classes=base_set.n_classes)
    params, losses = pretrain_base(params, base_set, config)
    assert losses[-1] < losses[0]
    params, _ = episodic_train(params, base_set, config)
    return params


def test_novel_class_accuracy(trained, splits):
    _, novel_set = splits
    five = meta_test(trained, novel_set, 5, 5, 1000, seed=1, query=15)
    one = meta_test(trained, novel_set, 5, 1, 1000, seed=1, query=19)
    assert five.mean >= 0.95
    assert one.mean >= 0.85
    assert five.ci95 < 0.02


def test_random_embeddings_stay_at_chance(splits):
    _, novel_set = splits
    rng = np.random.default_rng(5)
    embedded = GraphSet(X=rng.standard_normal((len(novel_set), 32)), y=novel_set.y,
                        class_names=novel_set.class_names, sample_ids=novel_set.sample_ids)
    result = meta_test_embeddings(embedded, 5, 1, 1000, seed=2, query=19)
    assert abs(result.mean - 0.2) <= 0.03


def test_task_memory_never_hurts_much(trained, splits):
    _, novel_set = splits
    for seed in (11, 12, 13):
        plain = meta_test(trained, novel_set, 5, 1, 1000, seed=seed, query=19, tau=0.0)
        memory = meta_test(trained, novel_set, 5, 1, 1000, seed=seed, query=19, tau=0.5)
        assert memory.mean >= plain.mean - 0.01


def test_meta_test_deterministic(trained, splits):
    _, novel_set = splits
    a = meta_test(trained, novel_set, 5, 1, 200, seed=3)
    b = meta_test(trained, novel_set, 5, 1, 200, seed=3, workers=4)
    np.testing.assert_array_equal(a.accuracies, b.accuracies)


def test_pretrain_checkpoint_bytes_deterministic(splits):
    base_set, _ = splits
    config = TrainConfig.from_params(ParamHandler(overrides={**DESK, 'epochs': 2}))
    blobs = []
    for _ in range(2):
        params, _ = pretrain_base(init_embedder(config, base_set.n_classes), base_set, config)
        blobs.append(iotasks.encode_checkpoint(params))
    assert blobs[0] == blobs[1]


def reference_set(base_set, novel_set, known):
    """The first REFS_PER_CLASS graphs of every base class and of the known
    novel classes, relabelled into one GraphSet."""
    parts = [(base_set, c) for c in range(base_set.n_classes)] + [(novel_set, c) for c in known]
    X, y, names, ids = [], [], [], []
    for label, (gs, c) in enumerate(parts):
        idx = gs.class_indices(c)[:REFS_PER_CLASS]
        X.append(gs.X[idx])
        y.append(np.full(len(idx), label))
        names.append(gs.class_names[c])
        ids += [gs.sample_ids[i] for i in idx]
    return GraphSet(X=np.concatenate(X), y=np.concatenate(y), class_names=names, sample_ids=ids)


def test_threshold_sweep_trend(trained, splits):
    base_set, novel_set = splits
    levels = {f'class_{c:02d}': CORPUS.class_profile(c)['low_bits']
              for c in range(CORPUS.n_classes)}
    inner = [c for c, name in enumerate(novel_set.class_names)
             if min(levels.values()) < levels[name] < max(levels.values())]
    # the unknown family's entropy levels lie inside the range the references cover
    unknown_class = inner[0]
    known = [c for c in range(novel_set.n_classes) if c != unknown_class]
    index = index_from_graphs(trained, reference_set(base_set, novel_set, known))
    held_out = [novel_set.class_indices(c)[REFS_PER_CLASS:] for c in known]
    n_known = sum(len(idx) for idx in held_out)
    # a fifth of the test samples come from a class the index has never seen
    unknown = novel_set.class_indices(unknown_class)[:n_known // 4]
    test = novel_set.take(np.concatenate(held_out + [unknown]))

    # no class fills more than REFS_PER_CLASS of the 20 neighbours
    for emb in embed_batch(trained, test.X):
        dec = triage_embedding(index, emb, k=20, threshold=1.0)
        assert len({h.label for h in dec.hits}) >= 4
        assert max(dec.ratios.values()) <= Fraction(1, 2)

    df = threshold_sweep(trained, index, test, thresholds=[0.50, 0.45, 0.40, 0.30], k=20)
    classified = df.classified_pct.to_numpy()
    accuracy = df.accuracy_pct.to_numpy()
    assert np.all(np.diff(classified) > 0)
    assert np.all(np.diff(accuracy) <= 0)
    assert df.risk_pool_pct.iloc[0] > 0

