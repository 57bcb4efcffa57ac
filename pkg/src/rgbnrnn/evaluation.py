"""Perplexity, topic-guided generation, BLEU and hidden-state norm traces."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Corpus, CorpusError, Document, make_batch
from .inference import posterior_thetas
from .randvar import make_rng, sample_gamma

BLEU_EPS = 1e-9
MODES = ("from-noise", "single-topic", "topic-combination", "conditioned")


# topic weights for scored sentences ------------------------------------------------

def sentence_thetas(model, docs: Sequence[Document], context_mode: str | None = None,
                    mean: bool = True, rng=None) -> list[list[np.ndarray]]:
    """Per document, per layer, the (J, K_l) topic weights the encoder assigns.

    Contexts are built from ``context_mode`` (the model's test mode by
    default); only the bag-of-words contexts reach the encoder.
    """
    mode = context_mode or model.test_context
    out = []
    for doc in docs:
        batch = make_batch([doc], model.vocab, mode, model.config.max_sentence_len)
        with ad.no_grad():
            th = posterior_thetas(batch.contexts, batch.doc_mask, model.encoder, model.topic, mean, rng)
        out.append([t[0, :doc.J] for t in th])
    return out


def token_logprob_rows(model, corpus: Corpus, context_mode: str | None = None, mean: bool = True,
                       rng=None, include_eos: bool | None = None) -> list[tuple]:
    """(doc, sentence, position, token, logp) for every scored token, dropout off."""
    if not corpus.documents:
        raise CorpusError("empty corpus")
    vocab = model.vocab
    include_eos = model.config.include_eos if include_eos is None else include_eos
    thetas = sentence_thetas(model, corpus.documents, context_mode, mean, rng)
    rows = []
    for d, (doc, th) in enumerate(zip(corpus.documents, thetas)):
        batch = make_batch([doc], vocab, "leave-one-out", model.config.max_sentence_len, include_eos)
        N, T = batch.inputs.shape
        per_sent = [th[l][batch.sent_index[:, 1]] for l in range(model.topic.L)]
        with ad.no_grad():
            lp = model.lm.token_logprobs(batch.inputs, batch.targets, per_sent).data.reshape(T, N)
        for r in range(N):
            for t in np.flatnonzero(batch.token_mask[r]):
                rows.append((d, int(batch.sent_index[r, 1]) + 1, int(t),
                             vocab.lm_tokens[batch.targets[r, t]], float(lp[t, r])))
    return rows


def perplexity_from_logprobs(logps) -> float:
    logps = np.asarray(logps, dtype=np.float64)
    if logps.size == 0:
        raise CorpusError("no tokens to score")
    return float(np.exp(-logps.mean()))


def perplexity(model, corpus: Corpus, context_mode: str | None = None, mean: bool = True,
               rng=None, export_path=None) -> float:
    """exp of the negative mean per-token log-likelihood over ``corpus``."""
    rows = token_logprob_rows(model, corpus, context_mode, mean, rng)
    if export_path is not None:
        write_logprob_csv(rows, export_path)
    return perplexity_from_logprobs([r[4] for r in rows])


def write_logprob_csv(rows, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["doc", "sentence", "position", "token", "logp"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], r[3], repr(r[4])])


def unigram_perplexity(train: Corpus, test: Corpus, include_eos: bool = True, add: float = 1.0) -> float:
    """Add-``add`` smoothed unigram baseline over the LM vocabulary."""
    vocab = train.vocab
    counts = np.full(vocab.V, add)
    skip = {vocab.pad_id, vocab.bos_id}
    for doc in train.documents:
        for s in doc.sentences:
            np.add.at(counts, np.asarray(s, dtype=np.int64), 1.0)
            if include_eos:
                counts[vocab.eos_id] += 1
    for i in skip:
        counts[i] = 0.0
    with np.errstate(divide="ignore"):
        logp = np.log(counts / counts.sum())
    scored = []
    for doc in test.documents:
        for s in doc.sentences:
            ids = list(s)
            if include_eos:
                ids.append(vocab.eos_id)
            scored.extend(logp[ids])
    return perplexity_from_logprobs(scored)


# generation ----------------------------------------------------------------------

@dataclass
class GenerationSpec:
    mode: str = "from-noise"
    layer: int = 1                      # 1-based, single-topic mode
    topic_id: int = 0
    magnitude: float = 1.0
    topics: list = field(default_factory=list)   # [(layer, topic_id, magnitude), ...]
    document: list | None = None        # list of sentences (token strings)
    decode: str = "greedy"
    temperature: float = 1.0
    max_len: int = 30
    seed: int = 0
    propagate: str = "sample"           # how lower layers follow a fixed upper layer

    def validate(self, K: Sequence[int]) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown generation mode {self.mode!r}; choose from {MODES}")
        if self.decode not in ("greedy", "sample"):
            raise ValueError("decode must be 'greedy' or 'sample'")
        if self.propagate not in ("sample", "mean"):
            raise ValueError("propagate must be 'sample' or 'mean'")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.decode == "sample" and not self.temperature > 0:
            raise ValueError("temperature must be positive")
        picks = []
        if self.mode == "single-topic":
            picks = [(self.layer, self.topic_id, self.magnitude)]
        elif self.mode == "topic-combination":
            if not self.topics:
                raise ValueError("topic-combination needs at least one (layer, topic, magnitude)")
            picks = self.topics
        for layer, k, mag in picks:
            if not 1 <= layer <= len(K):
                raise ValueError(f"layer {layer} outside 1..{len(K)}")
            if not 0 <= k < K[layer - 1]:
                raise ValueError(f"topic {k} outside 0..{K[layer - 1] - 1} at layer {layer}")
            if not mag > 0:
                raise ValueError("topic magnitude must be positive")
        if self.mode == "conditioned" and not self.document:
            raise ValueError("conditioned mode needs a document")


def _propagate_down(topic, fixed: dict, rng, how: str) -> list[np.ndarray]:
    """Fill layers below the highest fixed layer from the gamma prior.

    ``fixed`` maps 0-based layer to a weight vector; layers above the top
    fixed one stay at zero, and a fixed lower layer adds to the propagated one.
    """
    L = topic.L
    top = max(fixed)
    theta = [np.zeros(k) for k in topic.K]
    for l in range(top, -1, -1):
        if l < top:
            shape = topic.Phi[l + 1] @ theta[l + 1]
            if how == "mean":
                theta[l] = shape / topic.tau0
            else:
                pos = shape > 0
                theta[l][pos] = sample_gamma(shape[pos], topic.tau0, rng)
        if l in fixed:
            theta[l] = theta[l] + fixed[l]
    assert len(theta) == L
    return theta


def spec_thetas(model, spec: GenerationSpec, rng) -> list[np.ndarray]:
    topic = model.topic
    if spec.mode == "from-noise":
        top = sample_gamma(topic.nu, topic.tau0, rng)
        return _propagate_down(topic, {topic.L - 1: top}, rng, spec.propagate)
    if spec.mode in ("single-topic", "topic-combination"):
        picks = [(spec.layer, spec.topic_id, spec.magnitude)] if spec.mode == "single-topic" else spec.topics
        fixed = {}
        for layer, k, mag in picks:
            v = fixed.setdefault(layer - 1, np.zeros(topic.K[layer - 1]))
            v[k] += mag
        return _propagate_down(topic, fixed, rng, spec.propagate)
    doc = _as_document(model, spec.document)
    th = sentence_thetas(model, [doc], "leave-one-out", mean=True)[0]
    return [t[-1] for t in th]


def _as_document(model, doc) -> Document:
    if isinstance(doc, Document):
        return doc
    return Document(tuple(tuple(model.vocab.encode(s)) for s in doc))


def decode(model, thetas: list, method: str = "greedy", temperature: float = 1.0,
           max_len: int = 30, rng=None) -> tuple[list[int], bool]:
    """Emit ids from a zero LM state until EOS or ``max_len``; EOS is not returned."""
    lm, vocab = model.lm, model.vocab
    banned = [vocab.pad_id, vocab.bos_id]
    out = []
    with ad.no_grad():
        proj = lm.project_thetas([Tensor(np.asarray(t, dtype=np.float64)[None, :]) for t in thetas])
        state = lm.zero_state(1)
        tok = np.array([vocab.bos_id])
        for _ in range(max_len):
            feats, state = lm.step(tok, state, proj)
            logits = (ad.concat(feats, axis=1) @ lm.params["W_o"] + lm.params["b_o"]).data[0]
            logits[banned] = -np.inf
            if method == "greedy":
                nxt = int(np.argmax(logits))
            else:
                z = logits / temperature
                p = np.exp(z - z.max())
                nxt = int(rng.choice(p.size, p=p / p.sum()))
            if nxt == vocab.eos_id:
                return out, True
            out.append(nxt)
            tok = np.array([nxt])
    return out, False


def generate_sentence(model, spec: GenerationSpec) -> list[str]:
    return generate_record(model, spec)["tokens"]


def generate_record(model, spec: GenerationSpec) -> dict:
    """Generation plus an echo of the spec, the shape of one JSONL output line."""
    spec.validate(model.topic.K)
    rng = make_rng([spec.seed, 3])
    thetas = spec_thetas(model, spec, rng)
    ids, eos = decode(model, thetas, spec.decode, spec.temperature, spec.max_len, rng)
    return {"spec": asdict(spec), "tokens": model.vocab.decode(ids), "eos": eos}


def generate_paragraph(model, doc, mean: bool = True, context_mode: str = "leave-one-out",
                       decode_method: str = "greedy", temperature: float = 1.0, max_len: int = 30,
                       seed: int = 0) -> list[list[str]]:
    """One sentence per position of ``doc``, each guided by that position's topic weights."""
    doc = _as_document(model, doc)
    rng = make_rng([seed, 4])
    th = sentence_thetas(model, [doc], context_mode, mean, None if mean else rng)[0]
    out = []
    for j in range(doc.J):
        ids, _ = decode(model, [t[j] for t in th], decode_method, temperature, max_len, rng)
        out.append(model.vocab.decode(ids))
    return out


def write_jsonl(records, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# BLEU ------------------------------------------------------------------------------

def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence], references: Sequence[Sequence], n: int = 4) -> float:
    """Corpus BLEU-n of ``candidates`` against one shared reference set.

    Uniform weights over orders 1..n; each candidate n-gram count is clipped
    by its maximum count in any single reference; a zero clipped count is
    replaced by ``BLEU_EPS``. Brevity penalty uses, per candidate, the
    closest reference length (shorter wins ties).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not candidates or not references:
        raise ValueError("need at least one candidate and one reference")
    max_ref = [Counter() for _ in range(n)]
    for ref in references:
        for k in range(n):
            for g, c in _ngrams(ref, k + 1).items():
                if c > max_ref[k][g]:
                    max_ref[k][g] = c
    ref_lens = sorted({len(r) for r in references})
    clipped = [0] * n
    total = [0] * n
    c_len = r_len = 0
    for cand in candidates:
        c_len += len(cand)
        r_len += min(ref_lens, key=lambda rl: (abs(rl - len(cand)), rl))
        for k in range(n):
            grams = _ngrams(cand, k + 1)
            total[k] += sum(grams.values())
            clipped[k] += sum(min(c, max_ref[k][g]) for g, c in grams.items())
    if c_len == 0:
        return 0.0
    log_p = sum(math.log((clipped[k] or BLEU_EPS) / max(total[k], 1)) for k in range(n)) / n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def self_bleu(candidates: Sequence[Sequence], n: int = 4) -> float:
    """Mean BLEU of each candidate against all the others."""
    if len(candidates) < 2:
        raise ValueError("self-BLEU needs at least two candidates")
    scores = [bleu([c], list(candidates[:i]) + list(candidates[i + 1:]), n)
              for i, c in enumerate(candidates)]
    return float(np.mean(scores))


# hidden-state norms ----------------------------------------------------------------

def hidden_states(model, doc, j: int, context_mode: str | None = None) -> tuple[list[str], list[np.ndarray]]:
    """LSTM hidden states while reading sentence ``j`` (1-based) of ``doc``.

    Returns the input tokens (BOS first) and one (T, H_l) array per layer.
    """
    doc = _as_document(model, doc)
    if not 1 <= j <= doc.J:
        raise IndexError(f"sentence {j} outside 1..{doc.J}")
    th = sentence_thetas(model, [doc], context_mode)[0]
    sent = list(doc.sentences[j - 1][:model.config.max_sentence_len])
    inputs = np.array([[model.vocab.bos_id] + sent])
    with ad.no_grad():
        _, trace = model.lm.run(inputs, [t[j - 1][None, :] for t in th])
    layers = [np.stack([step[l].data[0] for step in trace]) for l in range(model.lm.config.L)]
    return model.vocab.decode(inputs[0]), layers


def norm_trace(model, doc, j: int, context_mode: str | None = None) -> np.ndarray:
    """(T, L) array of L2 norms of each layer's hidden state at each step."""
    _, layers = hidden_states(model, doc, j, context_mode)
    return np.stack([np.linalg.norm(h, axis=1) for h in layers], axis=1)


def write_norm_trace(tokens: Sequence[str], norms: np.ndarray, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "token"] + [f"layer{l + 1}" for l in range(norms.shape[1])])
        for t, tok in enumerate(tokens):
            w.writerow([t, tok] + [repr(float(x)) for x in norms[t]])
