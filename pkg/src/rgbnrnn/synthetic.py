"""Planted corpora: documents drawn from a known multilayer recurrent topic model.

Every layer-1 topic owns a block of words and every upper topic a run of
lower topics. The transition matrices are near cyclic shifts, aligned so
that the upper layer's next topic covers exactly the lower topics the lower
transition moves to; the dominant topics of a sentence are then
predictable from the sentence before it. Words are emitted independently from the
normalised layer-1 rate of each sentence.
"""
from __future__ import annotations

import numpy as np

from .rgbn import TopicModelParams, generate_theta_path


def _near_permutation(K: int, stay: float, shift: int = 1) -> np.ndarray:
    m = np.full((K, K), (1.0 - stay) / max(K - 1, 1))
    for k in range(K):
        m[(k + shift) % K, k] = stay
    return m if K > 1 else np.ones((1, 1))


def planted_params(K=(6, 3), words_per_topic: int = 8, leak: float = 0.005, persistence: float = 0.97,
                   nu: float = 0.2, tau0: float = 0.05, recurrent: bool = True) -> TopicModelParams:
    """Block-sparse loadings with aligned cyclic-shift transitions.

    A small ``nu`` makes the first sentence's top layer sparse; a small
    ``tau0`` makes the weights grow along the chain so later draws are
    nearly deterministic.
    """
    K = list(K)
    Vc = K[0] * words_per_topic
    phi1 = np.full((Vc, K[0]), leak / Vc)
    for k in range(K[0]):
        phi1[k * words_per_topic:(k + 1) * words_per_topic, k] += (1.0 - leak) / words_per_topic
    Phi = [phi1 / phi1.sum(axis=0)]
    shifts = [1] * len(K)
    for l in range(1, len(K)):
        # each upper topic spreads over a contiguous run of lower topics
        m = np.full((K[l - 1], K[l]), leak / K[l - 1])
        per = max(K[l - 1] // K[l], 1)
        for k in range(K[l]):
            rows = [(k * per + i) % K[l - 1] for i in range(per)]
            m[rows, k] += (1.0 - leak) / per
        Phi.append(m / m.sum(axis=0))
        shifts[l - 1] = per
    Pi = [_near_permutation(k, persistence, s) for k, s in zip(K, shifts)]
    return TopicModelParams(Phi, Pi, tau0=tau0, recurrent=recurrent, nu=np.full(K[-1], nu))


def word_names(K1: int, words_per_topic: int) -> list[str]:
    return [f"t{k}w{i}" for k in range(K1) for i in range(words_per_topic)]


def sample_documents(params: TopicModelParams, n_docs: int, J: int, sent_len: int, rng,
                     words: list[str] | None = None) -> tuple[list, list]:
    """``n_docs`` documents of ``J`` sentences with ``sent_len`` words each.

    Returns (documents as nested token lists, per-document topic-weight paths).
    """
    Vc = params.Vc
    words = words or [f"v{i}" for i in range(Vc)]
    docs, paths = [], []
    for _ in range(n_docs):
        path = generate_theta_path(params, J, rng)
        rate = path.layers[0] @ params.Phi[0].T
        sents = []
        for j in range(J):
            p = rate[j] / rate[j].sum() if rate[j].sum() > 0 else np.full(Vc, 1.0 / Vc)
            ids = rng.choice(Vc, size=sent_len, p=p)
            sents.append([words[i] for i in ids])
        docs.append(sents)
        paths.append(path)
    return docs, paths


def planted_corpus(n_train: int = 200, n_test: int = 50, J: int = 6, sent_len: int = 8, seed: int = 0,
                   **kwargs) -> tuple[list, list, TopicModelParams]:
    """Train and held-out documents from one planted model."""
    rng = np.random.Generator(np.random.Philox([seed, 7]))
    params = planted_params(**kwargs)
    words = word_names(params.K[0], params.Vc // params.K[0])
    train, _ = sample_documents(params, n_train, J, sent_len, rng, words)
    test, _ = sample_documents(params, n_test, J, sent_len, rng, words)
    return train, test, params



def smoothed_decrease_fraction(values, window: int = 50) -> float:
    """Fraction of consecutive rolling-mean windows that go down."""
    v = np.asarray(values, dtype=np.float64)
    if v.size <= window:
        raise ValueError(f"need more than {window} values, got {v.size}")
    roll = np.convolve(v, np.ones(window) / window, mode="valid")
    return float(np.mean(np.diff(roll) < 0))


def learning_experiment(steps: int = 1500, seeds=(0,), corpus_kwargs: dict | None = None,
                        train_kwargs: dict | None = None, recurrent_kwargs: dict | None = None,
                        n_train: int = 200, n_test: int = 50, log=None) -> dict:
    """Train rGBN-RNN and GBN-RNN on one planted corpus; report held-out perplexities.

    ``train_kwargs`` apply to both models, ``recurrent_kwargs`` only to the
    recurrent one. Each model is scored with its own default test contexts.
    """
    from . import evaluation as ev
    from .config import TrainConfig
    from .corpus import Corpus, build_vocab, encode_documents
    from .trainer import Trainer

    train, test, _ = planted_corpus(n_train, n_test, **(corpus_kwargs or {}))
    vocab = build_vocab(train, min_count=1, trim_fraction=0.0, stopwords=frozenset())
    tc = Corpus(encode_documents(train, vocab), vocab)
    te = Corpus(encode_documents(test, vocab), vocab)
    base = dict(embed_dim=16, lm_hidden=(32, 16), topics=(6, 3), epochs=10**6)
    base.update(train_kwargs or {})
    out = {"unigram": ev.unigram_perplexity(tc, te), "runs": []}
    for seed in seeds:
        row = {"seed": seed}
        for name, rec in (("rgbn", True), ("gbn", False)):
            cfg = TrainConfig(**{**base, "recurrent": rec, "seed": seed, **((recurrent_kwargs or {}) if rec else {})})
            tr = Trainer.create(vocab, cfg)
            hist = tr.fit(tc, max_steps=steps)
            row[name] = ev.perplexity(tr.model, te)
            row[name + "_elbo"] = [h["elbo"] for h in hist]
        row["ratio"] = row["rgbn"] / row["gbn"]
        if log:
            log(f"seed {seed}: rGBN {row['rgbn']:.3f}  GBN {row['gbn']:.3f}  ratio {row['ratio']:.4f}")
        out["runs"].append(row)
    return out
