"""Stacked word-level LSTM whose layers are coupled to topic weights.

Layer ``l`` of the LSTM reads the word embedding (``l = 0``) or the coupled
feature of the layer below; a GRU-style gate mixes each layer's hidden state
with that layer's topic weight vector, and the output softmax reads the
concatenation of all coupled features.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LmConfig:
    V: int
    E: int = 300
    H: list = field(default_factory=lambda: [600])
    K: list = field(default_factory=lambda: [100])
    dropout: float = 0.4
    flipped: bool = False
    gated: bool = True

    @property
    def L(self) -> int:
        return len(self.H)

    def sigma(self, l: int) -> int:
        """Topic layer feeding LM layer ``l`` (reversed when flipped)."""
        return self.L - 1 - l if self.flipped else l

    def input_size(self, l: int) -> int:
        return self.E if l == 0 else self.H[l - 1]


@dataclass
class LmState:
    h: list
    c: list


def _uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape)


class LanguageModel:
    def __init__(self, config: LmConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: LmConfig, rng) -> "LanguageModel":
        if config.gated and len(config.K) != config.L:
            raise ValueError(f"need {config.L} topic layers for {config.L} LSTM layers, got {len(config.K)}")
        p = {"W_e": _uniform(rng, (config.V, config.E), 0.1)}
        for l, H in enumerate(config.H):
            n_in = config.input_size(l)
            p[f"lstm{l}.Wx"] = _uniform(rng, (n_in, 4 * H), 1 / np.sqrt(n_in + H))
            p[f"lstm{l}.Wh"] = _uniform(rng, (H, 4 * H), 1 / np.sqrt(n_in + H))
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0  # forget gate
            p[f"lstm{l}.b"] = b
            if config.gated:
                K = config.K[config.sigma(l)]
                p[f"gate{l}.W"] = _uniform(rng, (K, 3 * H), 1 / np.sqrt(K + H))
                p[f"gate{l}.U_zr"] = _uniform(rng, (H, 2 * H), 1 / np.sqrt(K + H))
                p[f"gate{l}.U_h"] = _uniform(rng, (H, H), 1 / np.sqrt(K + H))
                p[f"gate{l}.b"] = np.zeros(3 * H)
        total = sum(config.H)
        p["W_o"] = _uniform(rng, (total, config.V), 1 / np.sqrt(total))
        p["b_o"] = np.zeros(config.V)
        return cls(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()})

    # single steps -----------------------------------------------------------

    def lstm_step(self, state_h, state_c, x, l: int):
        p = self.params
        H = self.config.H[l]
        z = x @ p[f"lstm{l}.Wx"] + state_h @ p[f"lstm{l}.Wh"] + p[f"lstm{l}.b"]
        i = ad.sigmoid(z[:, :H])
        f = ad.sigmoid(z[:, H:2 * H])
        g = ad.tanh(z[:, 2 * H:3 * H])
        o = ad.sigmoid(z[:, 3 * H:])
        c = f * state_c + i * g
        h = o * ad.tanh(c)
        return h, c

    def theta_projection(self, theta: Tensor, l: int) -> Tensor:
        """W_{z,r,h} theta + b, constant across the time steps of a sentence."""
        return theta @ self.params[f"gate{l}.W"] + self.params[f"gate{l}.b"]

    def coupling_gate(self, h: Tensor, theta_proj: Tensor, l: int) -> Tensor:
        p = self.params
        H = self.config.H[l]
        zr = ad.sigmoid(theta_proj[:, :2 * H] + h @ p[f"gate{l}.U_zr"])
        z, r = zr[:, :H], zr[:, H:]
        h_hat = ad.tanh(theta_proj[:, 2 * H:] + (r * h) @ p[f"gate{l}.U_h"])
        return h + z * (h_hat - h)

    def zero_state(self, n: int) -> LmState:
        return LmState([Tensor(np.zeros((n, H))) for H in self.config.H],
                       [Tensor(np.zeros((n, H))) for H in self.config.H])

    def step(self, tokens, state: LmState, theta_proj: list, masks=None):
        """Advance every layer by one token; returns (coupled features, new state)."""
        x = ad.take_rows(self.params["W_e"], tokens)
        feats, hs, cs = [], [], []
        for l in range(self.config.L):
            if masks is not None:
                x = ad.apply_mask(x, masks[l])
            h, c = self.lstm_step(state.h[l], state.c[l], x, l)
            a = self.coupling_gate(h, theta_proj[l], l) if self.config.gated else h
            feats.append(a)
            hs.append(h)
            cs.append(c)
            x = a
        return feats, LmState(hs, cs)

    # whole sentences ----------------------------------------------------------

    def project_thetas(self, thetas: list) -> list:
        if not self.config.gated:
            return [None] * self.config.L
        return [self.theta_projection(ad.as_tensor(thetas[self.config.sigma(l)]), l)
                for l in range(self.config.L)]

    def run(self, inputs: np.ndarray, thetas: list, masks=None):
        """Teacher-forced pass over (N, T) input ids.

        ``thetas[l]`` is (N, K_l) for topic layer ``l``; ``masks`` is an
        optional list (one per layer) of (T, N, in_l) dropout masks.
        Returns (log-probabilities as (T*N, V), per-step hidden states).
        """
        inputs = np.asarray(inputs)
        N, T = inputs.shape
        proj = self.project_thetas(thetas)
        state = self.zero_state(N)
        feats, trace = [], []
        for t in range(T):
            m = None if masks is None else [mk[t] for mk in masks]
            a, state = self.step(inputs[:, t], state, proj, m)
            feats.append(ad.concat(a, axis=1))
            trace.append(state.h)
        A = ad.concat(feats, axis=0)
        logp = ad.log_softmax(A @ self.params["W_o"] + self.params["b_o"], axis=1)
        return logp, trace

    def token_logprobs(self, inputs, targets, thetas, masks=None) -> Tensor:
        """(T*N,) log-probabilities of the targets, time-major."""
        targets = np.asarray(targets)
        if targets.size and (targets.min() < 0 or targets.max() >= self.config.V):
            raise IndexError("token id out of range")
        logp, _ = self.run(inputs, thetas, masks)
        flat = targets.T.reshape(-1)
        return logp[np.arange(flat.size), flat]

    def loglik(self, inputs, targets, token_mask, thetas, masks=None) -> Tensor:
        """Per-sentence log-likelihood, (N,), padding excluded."""
        N, T = np.shape(inputs)
        lp = self.token_logprobs(inputs, targets, thetas, masks)
        lp = lp * Tensor(np.asarray(token_mask, dtype=np.float64).T.reshape(-1))
        return ad.tsum(ad.reshape(lp, (T, N)), axis=0)

    def dropout_masks(self, rng, N: int, T: int) -> list:
        p = self.config.dropout
        keep = 1.0 - p
        return [(rng.random((T, N, self.config.input_size(l))) < keep) / keep
                for l in range(self.config.L)]

    def load_word_vectors(self, path, vocab) -> int:
        """Overwrite embedding rows from ``token v1 ... vE`` lines; returns rows filled."""
        W = self.params["W_e"].data
        filled = 0
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            parts = line.rstrip().split(" ")
            if len(parts) != self.config.E + 1 or parts[0] not in vocab.lm_index:
                continue
            W[vocab.lm_index[parts[0]]] = np.asarray(parts[1:], dtype=np.float64)
            filled += 1
        return filled


def param_count(E: int, H, K=None, Vc: int | None = None, Hs=None) -> dict:
    """Weight counts per component, ignoring biases and word embeddings.

    LSTM layer ``l``: 4 (in + H_l) H_l; coupling gate: 3 (K_l + H_l) H_l,
    pairing gate ``l`` with topic layer ``l`` whatever the wiring (so the
    flipped variant reports the same totals); Phi and Pi sizes and the
    encoder terms when ``Vc`` is given. The output projection is not counted.
    """
    H = list(H)
    L = len(H)
    lstm = [4 * ((E if l == 0 else H[l - 1]) + H[l]) * H[l] for l in range(L)]
    out = {"lstm": lstm, "gate": [], "lm_total": sum(lstm)}
    if K:
        K = list(K)
        out["gate"] = [3 * (K[l] + H[l]) * H[l] for l in range(L)]
        out["lm_total"] += sum(out["gate"])
        if Vc is not None:
            Hs = list(Hs) if Hs is not None else K
            rows = [Vc] + K[:-1]
            srows = [Vc] + Hs[:-1]
            out["phi"] = [rows[l] * K[l] for l in range(L)]
            out["pi"] = [k * k for k in K]
            out["rnn_sent"] = [(srows[l] + Hs[l]) * Hs[l] for l in range(L)]
            out["f_k"] = list(Hs)
            out["f_lambda"] = [K[l] * Hs[l] for l in range(L)]
            out["tm_total"] = sum(out["phi"]) + sum(out["pi"])
            out["encoder_total"] = sum(out["rnn_sent"]) + sum(out["f_k"]) + sum(out["f_lambda"])
    return out


def instantiated_weight_count(lm: LanguageModel) -> int:
    """LSTM and gate weight entries actually allocated, same exclusions as :func:`param_count`."""
    total = 0
    for name, p in lm.params.items():
        if name.startswith("lstm") and not name.endswith(".b"):
            total += p.data.size
        elif name.startswith("gate") and not name.endswith(".b"):
            total += p.data.size
    return total
