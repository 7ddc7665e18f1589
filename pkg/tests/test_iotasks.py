import json
import re

import numpy as np
import pandas as pd
import pytest

import triage_engine.entropy_features as ef
import triage_engine.iotasks as iotasks
from triage_engine.triage import load_index


def test_graph_file(tmp_path):
    graph = ef.graph_from_bytes(bytes(range(256)) * 12, size=6, provenance='s.bin')
    fpath = iotasks.write_graph(graph, tmp_path / 'sub' / 's.bin.entg')
    assert iotasks.is_graph_file(fpath)
    assert not iotasks.is_graph_file(tmp_path / 's.bin')
    assert fpath.stat().st_size == iotasks.GRAPH_HEADER.size + 4 * 36
    back = iotasks.read_graph(fpath)
    assert back.shape == (6, 6)
    assert back.provenance == str(fpath)
    assert not back.normalized
    np.testing.assert_allclose(back.pixels, graph.pixels, atol=1e-7)
    norm = iotasks.decode_graph(iotasks.encode_graph(ef.normalize_graph(graph)))
    assert norm.normalized


def test_graph_decode_errors():
    blob = iotasks.encode_graph(ef.EntropyGraph(pixels=np.zeros((2, 2))))
    with pytest.raises(ValueError, match='magic'):
        iotasks.decode_graph(b'XXXX' + blob[4:])
    with pytest.raises(ValueError, match='expected'):
        iotasks.decode_graph(blob + b'\x00')
    with pytest.raises(ValueError, match='version'):
        iotasks.decode_graph(blob[:4] + b'\x09\x00' + blob[6:])


def test_checkpoint(tmp_path, tiny_params):
    frozen = tiny_params.with_frozen({'conv0'})
    fpath = iotasks.save_checkpoint(frozen, tmp_path / 'ckpt' / 'model.embd')
    back = iotasks.load_checkpoint(fpath)
    assert back.arch == frozen.arch
    assert back.frozen == {'conv0'}
    assert set(back.tensors) == set(frozen.tensors)
    for k in frozen.tensors:
        np.testing.assert_array_equal(back[k], frozen[k])


def test_checkpoint_errors(tmp_path, tiny_params):
    blob = iotasks.encode_checkpoint(tiny_params)
    with pytest.raises(ValueError, match='trailing'):
        iotasks.decode_checkpoint(blob + b'\x00\x00')
    with pytest.raises(ValueError, match='magic'):
        iotasks.decode_checkpoint(b'ENTG' + blob[4:])
    with pytest.raises(FileNotFoundError):
        iotasks.load_checkpoint(tmp_path / 'missing.embd')


def test_index_codec():
    vectors = np.array([[0.6, 0.8], [1.0, 0.0], [0.0, 1.0]])
    blob = iotasks.encode_index(vectors, np.array([0, 1, 1]), ['trojan', 'worm'])
    v, labels, names = iotasks.decode_index(blob)
    np.testing.assert_allclose(v, vectors, atol=1e-7)
    np.testing.assert_array_equal(labels, [0, 1, 1])
    assert names == ['trojan', 'worm']
    with pytest.raises(ValueError):
        iotasks.decode_index(blob + b'\x00')


@pytest.mark.parametrize('keep', [0, 3, 5, 12, 40, -9, -1])
def test_truncated_checkpoint_names_the_file(tmp_path, tiny_params, keep):
    blob = iotasks.encode_checkpoint(tiny_params)
    fpath = tmp_path / 'cut.embd'
    fpath.write_bytes(blob[:keep])
    with pytest.raises(ValueError, match=re.escape(str(fpath))):
        iotasks.load_checkpoint(fpath)


@pytest.mark.parametrize('keep', [0, 6, 13, 20, -5, -1])
def test_truncated_index_names_the_file(tmp_path, keep):
    blob = iotasks.encode_index(np.eye(3), np.array([0, 1, 1]), ['trojan', 'worm'])
    fpath = tmp_path / 'cut.tidx'
    fpath.write_bytes(blob[:keep])
    with pytest.raises(ValueError, match=re.escape(str(fpath))):
        load_index(fpath)


def test_truncated_graph_names_the_file(tmp_path):
    blob = iotasks.encode_graph(ef.EntropyGraph(pixels=np.zeros((2, 2))))
    for keep in (0, 4, iotasks.GRAPH_HEADER.size - 1, len(blob) - 1):
        fpath = tmp_path / f'cut{keep}.entg'
        fpath.write_bytes(blob[:keep])
        with pytest.raises(ValueError, match=re.escape(str(fpath))):
            iotasks.read_graph(fpath)
    with pytest.raises(ValueError, match='truncated'):
        iotasks.decode_graph(blob[:5])


def test_jsonable(tmp_path):
    records = [{'acc': np.float64(0.5), 'n': np.int64(3), 'ok': np.bool_(True),
                'v': np.arange(2), 'path': tmp_path}]
    fpath = iotasks.write_jsonable(records * 2, tmp_path / 'r.jsonable')
    back = iotasks.load_jsonable(fpath)
    assert len(back) == 2
    assert back[0] == {'acc': 0.5, 'n': 3, 'ok': True, 'v': [0, 1], 'path': str(tmp_path)}
    with pytest.raises(TypeError):
        json.dumps({'x': object()}, cls=iotasks.ComplexEncoder)


def test_write_json_uses_repr(tmp_path):
    class Report:
        def reprJSON(self):
            return {'mean': 0.9}

    fpath = iotasks.write_json({'report': Report()}, tmp_path / 'out.json')
    assert json.loads(fpath.read_text()) == {'report': {'mean': 0.9}}


def test_dump_embeddings(tmp_path):
    vectors = np.array([[0.1, 0.2, 0.3], [1.0, 2.0, 3.0]])
    fpath = iotasks.dump_embeddings(['a.bin', 'b.bin'], [0, 2], vectors, tmp_path / 'emb.csv')
    df = pd.read_csv(fpath)
    assert list(df.columns) == ['sample_id', 'class_id', 'v0', 'v1', 'v2']
    assert list(df.class_id) == [0, 2]
    np.testing.assert_allclose(df[['v0', 'v1', 'v2']].to_numpy(), vectors)
