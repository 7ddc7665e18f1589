import numpy as np
import pytest

import triage_engine.embedder as emb


def numeric_grad(loss_fn, params, key, h=1e-6):
    base = params[key]
    out = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        out[idx] = (loss_fn(params.with_tensors({key: plus}))
                    - loss_fn(params.with_tensors({key: minus}))) / (2 * h)
    return out


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_architecture_shapes(tiny_arch):
    assert tiny_arch.pooled_size == 8
    assert tiny_arch.final_size == 2
    assert tiny_arch.flat_dim == 12
    assert tiny_arch.groups == ('conv0', 'conv1', 'fc1', 'fc2', 'head')
    shapes = tiny_arch.shapes()
    assert shapes['conv1.W'] == (3, 2, 3, 3)
    assert shapes['fc1.W'] == (6, 12)
    assert shapes['head.W'] == (3, 4)
    with pytest.raises(ValueError):
        emb.Architecture(input_size=8, input_pool=4, channels=(2, 2, 2))


def test_default_architecture():
    arch = emb.Architecture()
    assert arch.pooled_size == 56
    assert arch.final_size == 3
    assert arch.embed_dim == 64


def test_init_params_deterministic(tiny_arch):
    a, b = emb.init_params(tiny_arch, seed=1), emb.init_params(tiny_arch, seed=1)
    c = emb.init_params(tiny_arch, seed=2)
    for k in tiny_arch.shapes():
        np.testing.assert_array_equal(a[k], b[k])
    assert not np.array_equal(a['fc1.W'], c['fc1.W'])
    assert not np.any(a['conv0.b'])
    bound = np.sqrt(6 / 12)
    assert np.all(np.abs(a['fc1.W']) <= bound)


def test_params_are_immutable(tiny_params):
    with pytest.raises(ValueError):
        tiny_params['fc2.W'][0, 0] = 1.0
    with pytest.raises(ValueError):
        emb.EmbedderParams(arch=tiny_params.arch, tensors={'fc1.W': np.zeros((6, 12))})
    with pytest.raises(ValueError):
        tiny_params.with_frozen({'conv9'})


def test_frozen_below(tiny_arch):
    assert emb.frozen_below(tiny_arch, 'conv1') == {'conv0'}
    assert emb.frozen_below(tiny_arch, 'fc1') == {'conv0', 'conv1'}
    assert emb.frozen_below(tiny_arch, 'conv0') == frozenset()
    with pytest.raises(ValueError):
        emb.frozen_below(tiny_arch, 'head')


def test_with_head(tiny_params, rng):
    p = tiny_params.with_head(5, rng)
    assert p.arch.n_classes == 5
    assert p['head.W'].shape == (5, 4)
    np.testing.assert_array_equal(p['fc1.W'], tiny_params['fc1.W'])


def test_pool_input():
    x = np.arange(16.0).reshape(1, 4, 4)
    out = emb.pool_input(x, 2)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_maxpool_round_trip(rng):
    r = rng.standard_normal((2, 3, 5, 5))
    out, idx = emb.maxpool_forward(r)
    assert out.shape == (2, 3, 2, 2)
    assert out[0, 0, 0, 0] == r[0, 0, :2, :2].max()
    dr = emb.maxpool_backward(np.ones_like(out), idx, r.shape)
    assert dr.sum() == out.size
    assert not np.any(dr[:, :, 4, :])


def test_conv_forward_matches_direct_sum(rng):
    a = rng.standard_normal((1, 2, 4, 4))
    W = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    z, _ = emb.conv_forward(a, W, b)
    ap = np.pad(a, ((0, 0), (0, 0), (1, 1), (1, 1)))
    direct = np.sum(ap[0, :, 1:4, 2:5] * W[1]) + b[1]
    assert z[0, 1, 1, 2] == pytest.approx(direct)


def test_forward_shape_and_batch_independence(tiny_params, rng):
    x = rng.standard_normal((5, 16, 16))
    out, _ = emb.forward(tiny_params, x)
    assert out.shape == (5, 4)
    single, _ = emb.forward(tiny_params, x[2:3])
    np.testing.assert_allclose(single[0], out[2], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(emb.embed_batch(tiny_params, x, batch_size=2), out, atol=1e-12)


def test_float32_inference_close(tiny_params, rng):
    x = rng.standard_normal((3, 16, 16))
    np.testing.assert_allclose(emb.embed_batch(tiny_params, x, float32=True),
                               emb.embed_batch(tiny_params, x), rtol=1e-4, atol=1e-4)


def test_backward_matches_finite_differences(tiny_params, rng):
    x = rng.standard_normal((3, 16, 16))
    g = rng.standard_normal((3, 4))

    def loss(p):
        e, _ = emb.forward(p, x)
        return float(np.sum(e * g))

    _, cache = emb.forward(tiny_params, x)
    grads = emb.backward(tiny_params, cache, g)
    for key in [k for k in tiny_params.tensors if not k.startswith('head')]:
        assert rel_error(grads[key], numeric_grad(loss, tiny_params, key)) < 1e-4, key


def test_backward_only_requested_groups(tiny_params, rng):
    x = rng.standard_normal((2, 16, 16))
    e, cache = emb.forward(tiny_params, x)
    full = emb.backward(tiny_params, cache, np.ones_like(e))
    part = emb.backward(tiny_params, cache, np.ones_like(e), groups=['conv1', 'fc2'])
    assert set(part) == {'conv1.W', 'conv1.b', 'fc2.W', 'fc2.b'}
    np.testing.assert_allclose(part['conv1.W'], full['conv1.W'])
    assert emb.backward(tiny_params, cache, np.ones_like(e), groups=[]) == {}
