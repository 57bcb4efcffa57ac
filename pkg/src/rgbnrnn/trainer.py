"""Hybrid training: Adam on the neural weights, then Langevin moves on Phi/Pi.

Each step draws one set of uniform noise, takes a clipped Adam step on the
negative per-token ELBO, and feeds the very same topic-weight samples to
count augmentation and the simplex updates.
"""
from __future__ import annotations

import csv
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .corpus import Corpus, Vocab, batches
from .inference import NOISE_CLIP, elbo
from .model import RGBNRNN
from .randvar import make_rng
from .rgbn import TopicModelParams
from .tlasgr import FimAccumulators, tlasgr_step

CHECKPOINT_VERSION = "rgbnrnn-checkpoint/1"
METRIC_FIELDS = ("step", "elbo", "poisson_ll", "word_ll", "kl", "grad_norm", "eps_n")


class NumericError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


# optimiser ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_update(params: dict, grads: dict, state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """In-place bias-corrected Adam step over a dict of arrays; returns ``params``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Rescale all gradients together when their joint L2 norm exceeds ``max_norm``.

    Returns the (possibly rescaled) gradients and the norm before clipping.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# training loop --------------------------------------------------------------------

def _first_nonfinite(named) -> str | None:
    for name, arr in named:
        if not np.all(np.isfinite(arr)):
            return name
    return None


class Trainer:
    def __init__(self, model: RGBNRNN, rng=None):
        self.model = model
        self.config: TrainConfig = model.config
        c = self.config
        self.rng = rng if rng is not None else make_rng([c.seed, 1])
        self.adam = AdamState()
        self.fim = FimAccumulators(eps0=c.eps0, kappa=c.kappa, decay=c.fim_decay)
        self.step = 0
        self.epoch = 0
        self.batch_in_epoch = 0

    @classmethod
    def create(cls, vocab: Vocab, config: TrainConfig) -> "Trainer":
        return cls(RGBNRNN.init(vocab, config, make_rng([config.seed, 0])))

    def train_step(self, batch, rho: float = 1.0) -> dict:
        """One hybrid update on ``batch``; ``rho`` is corpus size over batch size."""
        model, c, rng = self.model, self.config, self.rng
        topic = model.topic
        m, J, _ = batch.contexts.shape
        noise = [np.clip(rng.random((m, J, k)), NOISE_CLIP, 1 - NOISE_CLIP) for k in topic.K]
        masks = None
        if c.dropout > 0:
            masks = model.lm.dropout_masks(rng, *batch.inputs.shape)

        params = model.neural_params()
        for p in params.values():
            p.zero_grad()
        terms = elbo(batch, model.encoder, model.lm, topic, noise, masks)
        n_tok = max(batch.n_tokens, 1)
        loss = terms.total * (-1.0 / n_tok)
        if not np.isfinite(loss.data):
            bad = _first_nonfinite([("poisson_ll", terms.poisson.data), ("word_ll", terms.word.data),
                                    ("kl", terms.kl.data)]
                                   + [(k, p.data) for k, p in params.items()])
            raise NumericError(f"non-finite loss at step {self.step + 1}; first non-finite tensor: {bad}")
        ad.backward(loss)
        grads = {k: p.grad for k, p in params.items()}
        bad = _first_nonfinite(grads.items())
        if bad is not None:
            raise NumericError(f"non-finite gradient at step {self.step + 1} in {bad}")
        grads, norm = clip_grad_norm(grads, c.clip_norm)
        adam_update({k: p.data for k, p in params.items()}, grads, self.adam, c.learning_rate)

        ctx = [batch.contexts[i, :d.J] for i, d in enumerate(batch.documents)]
        thetas = [[terms.thetas[l][i, :d.J] for l in range(topic.L)] for i, d in enumerate(batch.documents)]
        self.fim.rho = rho
        tlasgr_step(topic, ctx, thetas, self.fim, rng)
        self.step += 1
        return {
            "step": self.step,
            "elbo": float(terms.total.data) / n_tok,
            "poisson_ll": float(terms.poisson.data) / n_tok,
            "word_ll": float(terms.word.data) / n_tok,
            "kl": float(terms.kl.data) / n_tok,
            "grad_norm": norm,
            "eps_n": self.fim.eps,
        }

    def fit(self, corpus: Corpus, epochs: int | None = None, metrics_path=None,
            max_steps: int | None = None) -> list[dict]:
        """Run (or resume) training; every step's metrics are returned and optionally logged."""
        c = self.config
        epochs = c.epochs if epochs is None else epochs
        rho = len(corpus.documents) / min(c.batch_size, len(corpus.documents)) if corpus.documents else 1.0
        log = MetricsLog(metrics_path, append=self.step > 0) if metrics_path else None
        history = []
        try:
            while self.epoch < epochs:
                stream = batches(corpus, c.batch_size, c.max_sentence_len, seed=[c.seed, 2, self.epoch],
                                 context_mode=c.train_context, include_eos=c.include_eos)
                for b_idx, batch in enumerate(stream):
                    if b_idx < self.batch_in_epoch:
                        continue
                    if max_steps is not None and len(history) >= max_steps:
                        return history
                    row = self.train_step(batch, rho)
                    self.batch_in_epoch = b_idx + 1
                    history.append(row)
                    if log:
                        log.write(row)
                self.epoch += 1
                self.batch_in_epoch = 0
        finally:
            if log:
                log.close()
        return history

    # checkpoints ----------------------------------------------------------------------

    def state_arrays(self) -> dict:
        model = self.model
        arrays = {}
        for l in range(model.topic.L):
            arrays[f"topic/Phi{l}"] = model.topic.Phi[l]
            arrays[f"topic/Pi{l}"] = model.topic.Pi[l]
        arrays["topic/nu"] = model.topic.nu
        for k, p in model.lm.params.items():
            arrays[f"lm/{k}"] = p.data
        for k, p in model.encoder.params.items():
            arrays[f"enc/{k}"] = p.data
        for k in self.adam.m:
            arrays[f"adam_m/{k}"] = self.adam.m[k]
            arrays[f"adam_v/{k}"] = self.adam.v[k]
        if self.fim.P is not None:
            for l, (P, M) in enumerate(zip(self.fim.P, self.fim.M)):
                arrays[f"fim/P{l}"] = P
                arrays[f"fim/M{l}"] = M
        return arrays

    def save(self, path) -> None:
        f = self.fim
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "vocab": {"lm": list(self.model.vocab.lm_tokens), "tm": list(self.model.vocab.tm_tokens),
                      "counts": {k: int(v) for k, v in sorted(self.model.vocab.counts.items())}},
            "progress": {"step": self.step, "epoch": self.epoch, "batch_in_epoch": self.batch_in_epoch},
            "adam_t": self.adam.t,
            "fim": {"eps0": f.eps0, "kappa": f.kappa, "decay": f.decay, "floor": f.floor,
                    "rho": f.rho, "n": f.n},
            "rng": _rng_state_to_json(self.rng),
        }
        write_archive(path, meta, self.state_arrays())

    @classmethod
    def load(cls, path, expect_config: TrainConfig | None = None) -> "Trainer":
        meta, arrays = read_archive(path)
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {meta.get('version')!r}, "
                                  f"this build reads {CHECKPOINT_VERSION!r}")
        config = TrainConfig.from_dict(meta["config"])
        if config.hash() != meta["config_hash"]:
            raise CheckpointError(f"{path}: stored config does not match its hash")
        if expect_config is not None and _arch(expect_config) != _arch(config):
            raise CheckpointError(f"{path}: checkpoint architecture {_arch(config)} "
                                  f"differs from the requested config {_arch(expect_config)}")
        v = meta["vocab"]
        vocab = Vocab(tuple(v["lm"]), tuple(v["tm"]), dict(v["counts"]))
        L = len(config.topics)
        topic = TopicModelParams([arrays[f"topic/Phi{l}"] for l in range(L)],
                                 [arrays[f"topic/Pi{l}"] for l in range(L)],
                                 config.tau0, config.eta0, config.eta_pi, config.recurrent,
                                 arrays["topic/nu"])
        model = RGBNRNN.init(vocab, config, make_rng([config.seed, 0]))
        model.topic = topic
        for prefix, store in (("lm/", model.lm.params), ("enc/", model.encoder.params)):
            for k, p in store.items():
                key = prefix + k
                if key not in arrays or arrays[key].shape != p.data.shape:
                    raise CheckpointError(f"{path}: missing or misshapen array {key}")
                p.data = arrays[key].copy()
                p.zero_grad()
        tr = cls(model, _rng_state_from_json(meta["rng"]))
        tr.step = meta["progress"]["step"]
        tr.epoch = meta["progress"]["epoch"]
        tr.batch_in_epoch = meta["progress"]["batch_in_epoch"]
        tr.adam.t = meta["adam_t"]
        tr.adam.m = {k[len("adam_m/"):]: a.copy() for k, a in arrays.items() if k.startswith("adam_m/")}
        tr.adam.v = {k[len("adam_v/"):]: a.copy() for k, a in arrays.items() if k.startswith("adam_v/")}
        for key, val in meta["fim"].items():
            setattr(tr.fim, key, val)
        if "fim/P0" in arrays:
            tr.fim.P = [arrays[f"fim/P{l}"] for l in range(L)]
            tr.fim.M = [arrays[f"fim/M{l}"] for l in range(L)]
        return tr


ARCH_KEYS = ("embed_dim", "lm_hidden", "topics", "recurrent", "flipped", "log1p_input", "k_min",
             "tokenizer")


def _arch(c: TrainConfig) -> tuple:
    return tuple(getattr(c, k) for k in ARCH_KEYS)


# serialisation helpers -------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def write_archive(path, meta: dict, arrays: dict) -> None:
    """Zip of ``meta.json`` plus one ``.npy`` per array, byte-reproducible."""
    with zipfile.ZipFile(path, "w") as zf:
        _put(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            _put(zf, name + ".npy", buf.getvalue())


def _put(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def read_archive(path) -> tuple[dict, dict]:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    try:
        with zipfile.ZipFile(p) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)),
                                                                 allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise CheckpointError(f"{p}: unreadable checkpoint ({exc})") from None
    return meta, arrays


def _rng_state_to_json(rng) -> dict:
    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return {"__array__": [int(i) for i in x.ravel()], "dtype": str(x.dtype)}
        return x
    return conv(rng.bit_generator.state)


def _rng_state_from_json(state: dict):
    def conv(x):
        if isinstance(x, dict):
            if "__array__" in x:
                return np.array(x["__array__"], dtype=x["dtype"])
            return {k: conv(v) for k, v in x.items()}
        return x
    state = conv(state)
    if state["bit_generator"] != "Philox":
        raise CheckpointError(f"unsupported bit generator {state['bit_generator']!r}")
    bg = np.random.Philox()
    bg.state = state
    return np.random.Generator(bg)


class MetricsLog:
    """CSV stream of per-step training metrics."""

    def __init__(self, path, append: bool = False):
        p = Path(path)
        fresh = not (append and p.exists())
        self._fh = p.open("a" if not fresh else "w", newline="", encoding="utf-8")
        self._w = csv.DictWriter(self._fh, fieldnames=METRIC_FIELDS)
        if fresh:
            self._w.writeheader()

    def write(self, row: dict) -> None:
        self._w.writerow({k: row[k] for k in METRIC_FIELDS})
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()
