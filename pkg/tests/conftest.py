import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rgbnrnn.config import TrainConfig
from rgbnrnn.corpus import Corpus, build_vocab, encode_documents
from rgbnrnn.model import RGBNRNN
from rgbnrnn.randvar import make_rng

settings.register_profile("suite", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")


def random_docs(seed, n_docs=6, n_words=12, max_sents=4, max_len=6):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(n_words)]
    return [[[words[j] for j in rng.integers(0, n_words, rng.integers(1, max_len + 1))]
             for _ in range(rng.integers(1, max_sents + 1))] for _ in range(n_docs)]


@pytest.fixture
def toy_corpus():
    docs = random_docs(0, n_docs=6)
    vocab = build_vocab(docs, min_count=1, trim_fraction=0.0, stopwords=frozenset())
    return Corpus(encode_documents(docs, vocab), vocab)


def small_config(**kw):
    base = dict(embed_dim=5, lm_hidden=(6, 4), topics=(3, 2), batch_size=3, epochs=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def toy_model(toy_corpus):
    return RGBNRNN.init(toy_corpus.vocab, small_config(), make_rng(0))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(mod.RESULTS):
            terminalreporter.write_line(mod.RESULTS[n])
