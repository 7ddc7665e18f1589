import numpy as np
import pytest

import triage_engine.task_memory as tm
from triage_engine.errors import ZeroNormError


def memory_of(*vectors):
    return tm.TaskMemory(slots=tuple(tm.MemorySlot(class_id=i, vector=np.asarray(v, dtype=float),
                                                   support_count=1)
                                     for i, v in enumerate(vectors)))


def test_class_mean():
    np.testing.assert_array_equal(tm.class_mean([[3.0, 4.0]]).vector, [3, 4])
    slot = tm.class_mean([[0.0, 2.0], [2.0, 0.0]], class_id=4)
    np.testing.assert_array_equal(slot.vector, [1, 1])
    assert slot.support_count == 2 and slot.class_id == 4
    with pytest.raises(ValueError):
        tm.class_mean(np.empty((0, 3)))


def test_class_mean_permutation_invariant(rng):
    x = rng.standard_normal((7, 5))
    np.testing.assert_allclose(tm.class_mean(x).vector, tm.class_mean(x[::-1]).vector)


def test_slot_validation():
    with pytest.raises(ValueError):
        tm.MemorySlot(class_id=0, vector=np.ones(2), support_count=0)
    with pytest.raises(ValueError):
        tm.MemorySlot(class_id=0, vector=np.array([np.nan, 1.0]), support_count=1)
    with pytest.raises(ValueError):
        memory_of([1, 0]).extended([tm.MemorySlot(class_id=0, vector=np.ones(2), support_count=1)])


def test_build_memory_orders_by_label(rng):
    emb = rng.standard_normal((6, 3))
    labels = np.array([2, 0, 2, 1, 0, 1])
    memory = tm.build_memory(emb, labels)
    assert memory.class_ids == [0, 1, 2]
    np.testing.assert_allclose(memory.slot(2).vector, emb[[0, 2]].mean(axis=0))


def test_cosine_similarity():
    u = np.array([1.0, 2.0, 3.0])
    assert tm.cosine_similarity(u, u) == pytest.approx(1.0)
    assert tm.cosine_similarity(np.array([1.0, 0]), np.array([0, 1.0])) == 0.0
    assert tm.cosine_similarity(u, -u) == pytest.approx(-1.0)
    with pytest.raises(ZeroNormError):
        tm.cosine_similarity(u, np.zeros(3))


def test_attention_weights():
    x = np.array([1.0, 0.0])
    a = tm.attention_weights(x, memory_of([1, 0], [0, 1]))
    np.testing.assert_allclose(a, [0.679, 0.321], atol=5e-3)
    expected = np.exp(np.tanh(1.0)) / (np.exp(np.tanh(1.0)) + 1)
    assert a[0] == pytest.approx(expected)
    np.testing.assert_allclose(tm.attention_weights(x, memory_of([0, 1], [0, -1])), [0.5, 0.5])
    np.testing.assert_array_equal(tm.attention_weights(x, memory_of([3, 3])), [1.0])


def test_attention_sharpening_and_permutation(rng):
    x = rng.standard_normal(4)
    slots = [rng.standard_normal(4) for _ in range(5)]
    a = tm.attention_weights(x, memory_of(*slots))
    sims = [tm.cosine_similarity(x, s) for s in slots]
    assert np.argmax(a) == np.argmax(sims)
    assert np.all(a > 0) and a.sum() == pytest.approx(1.0)
    perm = [3, 0, 4, 1, 2]
    permuted = memory_of(*[slots[i] for i in perm])
    np.testing.assert_allclose(tm.attention_weights(x, permuted), a[perm])
    np.testing.assert_allclose(tm.read_memory(x, permuted)[0],
                               tm.read_memory(x, memory_of(*slots))[0])


def test_adaptive_prototype():
    memory = memory_of([2, 0], [0, 2])
    np.testing.assert_allclose(tm.adaptive_prototype([0.5, 0.5], memory), [1, 1])
    np.testing.assert_array_equal(tm.adaptive_prototype([0.0, 1.0], memory), [0, 2])
    with pytest.raises(ValueError):
        tm.adaptive_prototype([1.0], memory)


def test_adaptive_prototype_in_convex_hull(rng):
    slots = rng.standard_normal((4, 3))
    memory = memory_of(*slots)
    v = tm.adaptive_prototype(tm.attention_weights(rng.standard_normal(3), memory), memory)
    assert np.all(v >= slots.min(axis=0) - 1e-12)
    assert np.all(v <= slots.max(axis=0) + 1e-12)


def test_blend():
    v, f = np.array([2.0, 0.0]), np.array([0.0, 2.0])
    np.testing.assert_array_equal(tm.blend(v, f, 0).h, f)
    np.testing.assert_array_equal(tm.blend(v, f, 1).h, v)
    out = tm.blend(v, f, 0.5, source='support')
    np.testing.assert_array_equal(out.h, [1, 1])
    assert out.source == 'support' and out.tau == 0.5
    with pytest.raises(ValueError):
        tm.blend(v, f, 1.5)


def test_adapt_tau_zero_is_identity(rng):
    x = rng.standard_normal((3, 4))
    h, readout = tm.adapt(x, memory_of(*rng.standard_normal((2, 4))), 0.0)
    np.testing.assert_array_equal(h, x)
    assert not np.any(readout)


def test_adapt_matches_single_row_operations(rng):
    x = rng.standard_normal((3, 4))
    memory = memory_of(*rng.standard_normal((3, 4)))
    h, readout = tm.adapt(x, memory, 0.3)
    for i, row in enumerate(x):
        v_m = tm.adaptive_prototype(tm.attention_weights(row, memory), memory)
        np.testing.assert_array_equal(readout[i], v_m)
        np.testing.assert_array_equal(h[i], tm.blend(v_m, row, 0.3).h)
    with pytest.raises(ValueError):
        tm.adapt(x, memory, -0.1)


def test_blend_per_class():
    v = np.array([[2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
    f = np.array([[0.0, 2.0], [4.0, 0.0]])
    h = tm.blend_per_class(f, v, 0.5)
    assert h.shape == (2, 3, 2)
    np.testing.assert_array_equal(h[0, 0], [1, 1])
    np.testing.assert_array_equal(h[1, 2], [3, 1])
    np.testing.assert_array_equal(tm.blend_per_class(f, v, 0.0)[:, 1], f)
    np.testing.assert_array_equal(tm.blend_per_class(f, v, 1.0)[1], v)


def test_predict_distribution_per_class_queries(rng):
    protos, f = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    readouts = rng.standard_normal((3, 4))
    h_q = tm.blend_per_class(f, readouts, 0.4)
    p = tm.predict_distribution(h_q, protos)
    assert p.shape == (5, 3)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    for i in range(5):
        d = [np.sum((h_q[i, c] - protos[c]) ** 2) for c in range(3)]
        np.testing.assert_allclose(p[i], np.exp(-np.array(d)) / np.sum(np.exp(-np.array(d))))
    unblended = np.repeat(f[:, None], 3, axis=1)
    np.testing.assert_allclose(tm.predict_distribution(unblended, protos),
                               tm.predict_distribution(f, protos))
    with pytest.raises(ValueError):
        tm.predict_distribution(h_q[:, :2], protos)



def test_predict_distribution():
    p = tm.predict_distribution(np.array([0.0, 0.0]), np.array([[0.0, 0.0], [5.0, 5.0]]))
    assert p[0] == pytest.approx(1.0)
    assert p[1] == pytest.approx(np.exp(-50.0), rel=1e-6)
    np.testing.assert_allclose(
        tm.predict_distribution(np.zeros(2), np.array([[1.0, 0], [0, 1.0], [-1.0, 0]])),
        [1 / 3] * 3)
    with pytest.raises(ValueError):
        tm.predict_distribution(np.zeros(2), np.zeros((1, 2)))


def test_predict_distribution_translation_invariant(rng):
    q, protos, shift = rng.standard_normal(3), rng.standard_normal((4, 3)), rng.standard_normal(3)
    np.testing.assert_allclose(tm.predict_distribution(q + shift, protos + shift),
                               tm.predict_distribution(q, protos))
    batch = tm.predict_distribution(np.stack([q, q]), protos)
    assert batch.shape == (2, 4)
    np.testing.assert_allclose(batch.sum(axis=1), 1.0)


def test_prototypes_from_memory(rng):
    memory = memory_of(*rng.standard_normal((3, 4)))
    h, readout, means = tm.prototypes_from_memory(memory, 0.5, class_ids=[2, 0])
    np.testing.assert_array_equal(means, memory.matrix[[2, 0]])
    np.testing.assert_allclose(h, 0.5 * readout + 0.5 * means)
