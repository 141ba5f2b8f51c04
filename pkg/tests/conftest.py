import numpy as np
import pytest

from textshield.data import encode, load_corpus
from textshield.synthetic import SyntheticConfig, generate
from textshield.victims import TrainConfig, VictimModel, train_victim


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    paths = generate(out, SyntheticConfig(n_train=400, n_test=120, seed=3))
    return load_corpus(paths["train"], paths["test"], paths["lexicon"], 2, paths["vectors"])


def _trained(corpus, arch, **hyper):
    model = VictimModel.create(arch, corpus.vocab, 2, seed=1, **hyper)
    train = [encode(t, corpus.vocab, y) for y, t in corpus.train]
    model, _ = train_victim(model, train, TrainConfig(epochs=3, seed=2, dropout=0.0))
    return model


@pytest.fixture(scope="session")
def cnn_victim(corpus):
    return _trained(corpus, "textcnn", emb_dim=12, n_filters=8, max_len=24)


@pytest.fixture(scope="session")
def lstm_victim(corpus):
    return _trained(corpus, "lstm", emb_dim=8, hidden=8, max_len=24)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
