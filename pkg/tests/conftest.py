import numpy as np
import pytest

from triage_engine.dataset import GraphSet, SynthSpec, synth_dataset
from triage_engine.embedder import Architecture, init_params
from triage_engine.meta_model import TrainConfig

TINY_SIZE = 16


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    """16x16 input pooled to 8x8, two blocks down to 2x2."""
    return Architecture(input_size=TINY_SIZE, input_pool=2, channels=(2, 3), hidden=6,
                        embed_dim=4, n_classes=3)


@pytest.fixture
def tiny_params(tiny_arch):
    return init_params(tiny_arch, seed=7)


@pytest.fixture
def tiny_config():
    return TrainConfig(graph_size=TINY_SIZE, input_pool=2, channels=(4, 8), hidden=16,
                       embed_dim=8, trainable_from='conv1', learning_rate=0.01, batch_size=16,
                       epochs=5, episodes=20, way=3, shot=1, query=5, seed=3)


def level_set(levels, per_class: int, seed: int = 0, noise: float = 0.1,
              size: int = TINY_SIZE) -> GraphSet:
    """Classes of constant images at the given levels plus gaussian noise."""
    rng = np.random.default_rng(seed)
    X = np.concatenate([lev + noise * rng.standard_normal((per_class, size, size))
                        for lev in levels])
    y = np.repeat(np.arange(len(levels)), per_class)
    return GraphSet(X=X, y=y, class_names=[f'level_{i}' for i in range(len(levels))],
                    sample_ids=[f's{i}' for i in range(len(y))])


@pytest.fixture
def make_level_set():
    return level_set


@pytest.fixture(scope='session')
def synth_root(tmp_path_factory):
    spec = SynthSpec(n_classes=6, samples_per_class=12, seed=5)
    root = tmp_path_factory.mktemp('synth')
    synth_dataset(spec, root)
    return root
