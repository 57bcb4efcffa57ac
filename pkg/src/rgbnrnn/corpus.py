"""Corpus ingestion: vocabularies, sentence-context pairs and mini-batches.

A corpus file holds one sentence per line with documents separated by a
blank line. Two vocabularies are built: the language-model vocabulary
(every frequent token plus special symbols) and the smaller topic-model
vocabulary used for bag-of-words contexts.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .randvar import make_rng

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)

DEFAULT_STOPWORDS = Path(__file__).parent / "data" / "stopwords.txt"

_TOKEN_RE = re.compile(r"\w+(?:'\w+)?|[^\w\s]")

Tokenizer = Callable[[str], list]


class CorpusError(ValueError):
    pass


def simple_tokenize(text: str) -> list[str]:
    """Lowercased word/punctuation split, the default tokenizer."""
    return _TOKEN_RE.findall(text.lower())


def whitespace_tokenize(text: str) -> list[str]:
    return text.lower().split()


def load_stopwords(path=DEFAULT_STOPWORDS) -> frozenset:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"stopword file not found: {p}")
    words = (w.strip().lower() for w in p.read_text(encoding="utf-8").splitlines())
    return frozenset(w for w in words if w and not w.startswith("#"))


@dataclass(frozen=True)
class Vocab:
    lm_tokens: tuple
    tm_tokens: tuple
    counts: dict = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "lm_index", {t: i for i, t in enumerate(self.lm_tokens)})
        object.__setattr__(self, "tm_index", {t: i for i, t in enumerate(self.tm_tokens)})
        lm_to_tm = np.full(len(self.lm_tokens), -1, dtype=np.int64)
        for t, i in self.tm_index.items():
            lm_to_tm[self.lm_index[t]] = i
        object.__setattr__(self, "lm_to_tm", lm_to_tm)

    @property
    def V(self) -> int:
        return len(self.lm_tokens)

    @property
    def Vc(self) -> int:
        return len(self.tm_tokens)

    @property
    def pad_id(self) -> int:
        return self.lm_index[PAD]

    @property
    def unk_id(self) -> int:
        return self.lm_index[UNK]

    @property
    def bos_id(self) -> int:
        return self.lm_index[BOS]

    @property
    def eos_id(self) -> int:
        return self.lm_index[EOS]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        unk = self.unk_id
        return [self.lm_index.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.lm_tokens[i] for i in ids]

    def to_tsv(self, path) -> None:
        """Write ``token<TAB>id<TAB>count`` rows; the TM vocabulary follows a marker line."""
        lines = [f"{t}\t{i}\t{self.counts.get(t, 0)}" for i, t in enumerate(self.lm_tokens)]
        lines.append("#tm")
        lines += [f"{t}\t{i}\t{self.counts.get(t, 0)}" for i, t in enumerate(self.tm_tokens)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_tsv(cls, path) -> "Vocab":
        lm, tm, counts = [], [], {}
        target = lm
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line == "#tm":
                target = tm
                continue
            tok, idx, cnt = line.split("\t")
            if int(idx) != len(target):
                raise CorpusError(f"{path}: ids must be dense, got {idx} at row {len(target)}")
            target.append(tok)
            if tok not in SPECIALS:
                counts[tok] = int(cnt)
        return cls(tuple(lm), tuple(tm), counts)


def build_vocab(corpus: Iterable, min_count: int = 10, trim_fraction: float = 0.001,
                stopwords=DEFAULT_STOPWORDS) -> Vocab:
    """Build both vocabularies from tokenized, lowercased text.

    ``corpus`` may be a flat token stream or nested documents/sentences of
    tokens. Tokens seen fewer than ``min_count`` times are dropped from both
    vocabularies; the topic-model vocabulary also drops stopwords and the
    ``trim_fraction`` most frequent word types and pure punctuation.
    """
    if not isinstance(stopwords, (set, frozenset)):
        stopwords = load_stopwords(stopwords)
    counts = Counter(_flatten(corpus))
    if not counts:
        raise CorpusError("empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    n_trim = int(trim_fraction * len(kept))
    tm = sorted((t for t in kept[n_trim:] if t not in stopwords and _is_word(t)),
                key=lambda t: (-counts[t], t))
    return Vocab(SPECIALS + tuple(kept), tuple(tm), {t: counts[t] for t in kept})


def _is_word(tok: str) -> bool:
    return any(ch.isalnum() for ch in tok)


def _flatten(x) -> Iterator[str]:
    for item in x:
        if isinstance(item, str):
            yield item
        else:
            yield from _flatten(item)


@dataclass(frozen=True)
class Document:
    sentences: tuple  # tuple of tuples of LM token ids

    @property
    def J(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class SentenceContextPair:
    tokens: tuple
    context: np.ndarray
    j: int


@dataclass
class Corpus:
    documents: list
    vocab: Vocab

    def __len__(self):
        return len(self.documents)

    def n_tokens(self, include_eos: bool = True) -> int:
        return sum(len(s) + include_eos for d in self.documents for s in d.sentences)


def encode_documents(raw_docs: Sequence, vocab: Vocab, max_sentence_len: int | None = None) -> list[Document]:
    docs = []
    for raw in raw_docs:
        sents = []
        for s in raw:
            ids = vocab.encode(s)
            if max_sentence_len is not None:
                ids = ids[:max_sentence_len]
            if ids:
                sents.append(tuple(ids))
        if sents:
            docs.append(Document(tuple(sents)))
    return docs


def read_raw_documents(path, tokenizer: Tokenizer = whitespace_tokenize) -> list[list[list[str]]]:
    """Parse the blank-line separated corpus format into token lists."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"corpus file not found: {p}")
    docs, current = [], []
    for line in p.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            if current:
                docs.append(current)
                current = []
            continue
        toks = tokenizer(line)
        if toks:
            current.append(toks)
    if current:
        docs.append(current)
    return docs


def write_raw_documents(docs: Sequence, path) -> None:
    blocks = ["\n".join(" ".join(s) for s in d) for d in docs]
    Path(path).write_text("\n\n".join(blocks) + "\n", encoding="utf-8")


def sentence_counts(doc: Document, vocab: Vocab) -> np.ndarray:
    """J x V_c matrix of topic-vocabulary counts, one row per sentence."""
    out = np.zeros((doc.J, vocab.Vc), dtype=np.int64)
    for j, s in enumerate(doc.sentences):
        tm = vocab.lm_to_tm[np.asarray(s, dtype=np.int64)]
        tm = tm[tm >= 0]
        np.add.at(out[j], tm, 1)
    return out


def contexts(doc: Document, mode: str, vocab: Vocab) -> np.ndarray:
    """All J context vectors of a document at once (row j-1 is context j)."""
    rows = sentence_counts(doc, vocab)
    if mode == "leave-one-out":
        return rows.sum(axis=0, keepdims=True) - rows
    if mode == "preceding":
        out = np.zeros_like(rows)
        np.cumsum(rows[:-1], axis=0, out=out[1:])
        return out
    raise ValueError(f"unknown context mode {mode!r}")


def make_context(doc: Document, j: int, mode: str, vocab: Vocab) -> np.ndarray:
    """Context count vector of sentence ``j`` (1-based)."""
    if not 1 <= j <= doc.J:
        raise IndexError(f"sentence index {j} out of range 1..{doc.J}")
    return contexts(doc, mode, vocab)[j - 1]


def pairs(doc: Document, mode: str, vocab: Vocab) -> list[SentenceContextPair]:
    ctx = contexts(doc, mode, vocab)
    return [SentenceContextPair(s, ctx[j], j + 1) for j, s in enumerate(doc.sentences)]


@dataclass
class Batch:
    """A mini-batch of documents in padded array form.

    ``contexts`` is (m, J_max, V_c); ``doc_mask`` marks real sentences.
    Sentence arrays are flattened over (doc, j) in row-major order and
    ``sent_index`` holds the (doc, j) of every flattened row.
    """
    contexts: np.ndarray
    doc_mask: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    token_mask: np.ndarray
    sent_index: np.ndarray
    documents: list

    @property
    def n_docs(self) -> int:
        return self.contexts.shape[0]

    @property
    def n_tokens(self) -> int:
        return int(self.token_mask.sum())


def make_batch(docs: Sequence[Document], vocab: Vocab, context_mode: str = "leave-one-out",
               max_sentence_len: int = 30, include_eos: bool = True) -> Batch:
    m = len(docs)
    jmax = max(d.J for d in docs)
    ctx = np.zeros((m, jmax, vocab.Vc), dtype=np.float64)
    dmask = np.zeros((m, jmax), dtype=bool)
    sents, index = [], []
    for i, d in enumerate(docs):
        ctx[i, :d.J] = contexts(d, context_mode, vocab)
        dmask[i, :d.J] = True
        for j, s in enumerate(d.sentences):
            sents.append(list(s[:max_sentence_len]))
            index.append((i, j))
    T = max(len(s) for s in sents) + 1
    n = len(sents)
    inputs = np.full((n, T), vocab.pad_id, dtype=np.int64)
    targets = np.full((n, T), vocab.pad_id, dtype=np.int64)
    tmask = np.zeros((n, T), dtype=bool)
    for r, s in enumerate(sents):
        inputs[r, 0] = vocab.bos_id
        inputs[r, 1:len(s) + 1] = s
        targets[r, :len(s)] = s
        targets[r, len(s)] = vocab.eos_id
        tmask[r, :len(s) + include_eos] = True
    return Batch(ctx, dmask, inputs, targets, tmask, np.asarray(index, dtype=np.int64).reshape(-1, 2),
                 list(docs))


def batches(corpus: Corpus, batch_size: int = 8, max_sentence_len: int = 30, seed=0,
            context_mode: str = "leave-one-out", include_eos: bool = True,
            shuffle: bool = True) -> Iterator[Batch]:
    """One epoch of mini-batches in a seed-determined order; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(corpus.documents))
    if shuffle:
        order = make_rng(seed).permutation(order)
    for start in range(0, len(order), batch_size):
        docs = [corpus.documents[i] for i in order[start:start + batch_size]]
        yield make_batch(docs, corpus.vocab, context_mode, max_sentence_len, include_eos)
