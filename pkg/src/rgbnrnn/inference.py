"""Recurrent Weibull inference network and the evidence lower bound.

Each layer runs a plain tanh RNN over the sentence contexts of a document;
softplus heads give a scalar Weibull shape and a vector scale per layer.
Samples come from transformed uniform noise so the bound is differentiable
in every encoder and language-model weight. With recurrence switched off
the encoder becomes the upward-deterministic / downward-stochastic ladder
of the non-recurrent model (shape ``k + Phi theta_above``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import Tensor
from .rgbn import TopicModelParams

EULER_GAMMA = float(np.euler_gamma)
NOISE_CLIP = 1e-8


@dataclass
class EncoderConfig:
    Vc: int
    K: list
    recurrent: bool = True
    log1p_input: bool = False
    k_min: float = 0.1
    lam_min: float = 1e-10

    @property
    def L(self) -> int:
        return len(self.K)


class Encoder:
    def __init__(self, config: EncoderConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: EncoderConfig, rng) -> "Encoder":
        p = {}
        n_in = config.Vc
        for l, K in enumerate(config.K):
            p[f"rnn{l}.W_in"] = rng.normal(0, 1 / np.sqrt(n_in), (n_in, K))
            p[f"rnn{l}.W_rec"] = rng.normal(0, 1 / np.sqrt(K), (K, K))
            p[f"rnn{l}.b"] = np.zeros(K)
            p[f"head{l}.w_k"] = rng.normal(0, 1 / np.sqrt(K), (K, 1))
            p[f"head{l}.b_k"] = np.ones(1)
            p[f"head{l}.W_lam"] = rng.normal(0, 1 / np.sqrt(K), (K, K))
            p[f"head{l}.b_lam"] = np.zeros(K)
            n_in = K
        return cls(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()})

    def encode_step(self, d, h_prev=None):
        """One sentence for a batch of documents.

        ``d`` is (m, V_c); ``h_prev`` the per-layer hidden states of the
        previous sentence (``None`` at the first sentence, or always when the
        encoder is non-recurrent). Returns (hidden, k, lam) per layer; ``k``
        is (m, 1) and broadcasts over topics.
        """
        p = self.params
        x = np.log1p(d) if self.config.log1p_input else d
        x = ad.as_tensor(x)
        hs, ks, lams = [], [], []
        for l in range(self.config.L):
            pre = x @ p[f"rnn{l}.W_in"] + p[f"rnn{l}.b"]
            if h_prev is not None and self.config.recurrent:
                pre = pre + h_prev[l] @ p[f"rnn{l}.W_rec"]
            h = ad.tanh(pre)
            k = ad.clamp_min(ad.softplus(h @ p[f"head{l}.w_k"] + p[f"head{l}.b_k"]), self.config.k_min)
            lam = ad.clamp_min(ad.softplus(h @ p[f"head{l}.W_lam"] + p[f"head{l}.b_lam"]),
                               self.config.lam_min)
            hs.append(h)
            ks.append(k)
            lams.append(lam)
            x = h
        return hs, ks, lams


def weibull_sample(k, lam, eps) -> Tensor:
    """lam * (-ln(1 - eps)) ** (1 / k) with gradients to ``k`` and ``lam``."""
    log_base = np.log(-np.log1p(-np.asarray(eps, dtype=np.float64)))
    return ad.as_tensor(lam) * ad.exp(ad.div(Tensor(log_base), ad.as_tensor(k)))


def weibull_mean(k, lam) -> Tensor:
    k = ad.as_tensor(k)
    return ad.as_tensor(lam) * ad.exp(ad.lgamma(1.0 + 1.0 / k))


def sample_posterior(k, lam, rng) -> Tensor:
    shape = np.broadcast_shapes(np.shape(ad.as_tensor(k).data), np.shape(ad.as_tensor(lam).data))
    eps = np.clip(rng.random(shape), NOISE_CLIP, 1 - NOISE_CLIP)
    return weibull_sample(k, lam, eps)


def kl_weibull_gamma(k, lam, alpha, beta) -> Tensor:
    """Elementwise KL(Weibull(k, lam) || Gamma(alpha, rate=beta))."""
    k, lam, alpha = ad.as_tensor(k), ad.as_tensor(lam), ad.as_tensor(alpha)
    beta = float(beta)
    for name, v in (("k", k.data), ("lam", lam.data), ("alpha", alpha.data)):
        if np.any(~(v > 0)):
            raise ValueError(f"KL parameter {name} must be positive")
    if not beta > 0:
        raise ValueError("KL parameter beta must be positive")
    return (EULER_GAMMA * alpha / k - alpha * ad.log(lam) + ad.log(k)
            + beta * lam * ad.exp(ad.lgamma(1.0 + 1.0 / k))
            - (EULER_GAMMA + 1.0) - alpha * np.log(beta) + ad.lgamma(alpha))


def poisson_term(d: np.ndarray, theta1: Tensor, Phi1: np.ndarray) -> Tensor:
    """Per-row Poisson log-likelihood of contexts ``d`` (rows) under rate Phi1 theta."""
    rate = theta1 @ Phi1.T
    const = gammaln(np.asarray(d) + 1.0).sum(axis=-1)
    return ad.tsum(Tensor(d) * ad.log(rate) - rate, axis=-1) - Tensor(const)


def encode_ladder_gbn(encoder: Encoder, d, topic: TopicModelParams, noise=None, mean: bool = False):
    """Non-recurrent ladder encoding of independent contexts ``d`` (N, V_c).

    Deterministic upward pass, then top-down Weibull draws with shape
    ``k_l + Phi[l+1] theta[l+1]``. ``noise[l]`` is (N, K_l) uniform; with
    ``mean=True`` the Weibull means are propagated instead of samples.
    Returns (theta, k_eff, lam) per layer.
    """
    _, ks, lams = encoder.encode_step(d, None)
    L = encoder.config.L
    theta, k_eff = [None] * L, [None] * L
    for l in reversed(range(L)):
        k = ks[l]
        if l < L - 1:
            k = k + theta[l + 1] @ topic.Phi[l + 1].T
        k_eff[l] = k
        theta[l] = weibull_mean(k, lams[l]) if mean else weibull_sample(k, lams[l], noise[l])
    return theta, k_eff, lams


def _pair_terms(d, theta, k_eff, lams, topic: TopicModelParams, prior_shapes):
    """Poisson and per-layer KL terms for rows of independent (or per-j) pairs."""
    pois = poisson_term(d, theta[0], topic.Phi[0])
    kls = [ad.tsum(kl_weibull_gamma(k_eff[l], lams[l], prior_shapes[l], topic.tau0), axis=-1)
           for l in range(len(theta))]
    return pois, kls


@dataclass
class ElboTerms:
    total: Tensor
    poisson: Tensor
    word: Tensor
    kl: Tensor
    thetas: list        # per layer (m, J_max, K_l) arrays of the samples used
    n_tokens: int


def _gbn_prior_shapes(theta, topic):
    L = len(theta)
    shapes = []
    for l in range(L):
        if l == L - 1:
            shapes.append(Tensor(np.broadcast_to(topic.nu, theta[l].shape).copy()))
        else:
            shapes.append(theta[l + 1] @ topic.Phi[l + 1].T)
    return shapes


def gbn_elbo(contexts, inputs, targets, token_mask, encoder: Encoder, lm, topic: TopicModelParams,
             noise, masks=None):
    """ELBO of independent sentence-context pairs under the non-recurrent model.

    ``contexts`` is (N, V_c), one row per sentence; ``noise[l]`` is (N, K_l).
    Returns (total, poisson, word, kl, theta) with per-pair sums reduced.
    """
    theta, k_eff, lams = encode_ladder_gbn(encoder, contexts, topic, noise)
    pois, kls = _pair_terms(contexts, theta, k_eff, lams, topic, _gbn_prior_shapes(theta, topic))
    word = lm.loglik(inputs, targets, token_mask, theta, masks)
    kl = kls[0]
    for extra in kls[1:]:
        kl = kl + extra
    per_pair = pois + word - kl
    return ad.tsum(per_pair), ad.tsum(pois), ad.tsum(word), ad.tsum(kl), theta


def elbo(batch, encoder: Encoder, lm, topic: TopicModelParams, noise, masks=None) -> ElboTerms:
    """Single-sample ELBO of a batch of documents.

    ``noise[l]`` is a (m, J_max, K_l) array of uniforms. The reconstruction
    and word terms are counted once per sentence; the KL is summed over layers.
    """
    if not topic.recurrent:
        return _elbo_nonrecurrent(batch, encoder, lm, topic, noise, masks)
    m, J, _ = batch.contexts.shape
    L = topic.L
    h_prev, theta_prev = None, None
    pois_rows, kl_rows, theta_rows = [], [], [[] for _ in range(L)]
    for j in range(J):
        d = batch.contexts[:, j]
        hs, ks, lams = encoder.encode_step(d, h_prev)
        theta = [weibull_sample(ks[l], lams[l], noise[l][:, j]) for l in range(L)]
        shapes = []
        for l in range(L):
            if l == L - 1:
                s = (Tensor(np.broadcast_to(topic.nu, (m, topic.K[l])).copy()) if theta_prev is None
                     else theta_prev[l] @ topic.Pi[l].T)
            else:
                s = theta[l + 1] @ topic.Phi[l + 1].T
                if theta_prev is not None:
                    s = s + theta_prev[l] @ topic.Pi[l].T
            shapes.append(s)
        pois, kls = _pair_terms(d, theta, ks, lams, topic, shapes)
        kl = kls[0]
        for extra in kls[1:]:
            kl = kl + extra
        pois_rows.append(pois)
        kl_rows.append(kl)
        for l in range(L):
            theta_rows[l].append(theta[l])
        h_prev, theta_prev = hs, theta
    # rows of the flattened (J*m) layout are j-major
    flat = batch.sent_index[:, 1] * m + batch.sent_index[:, 0]
    mask = Tensor(batch.doc_mask.T.reshape(-1).astype(np.float64))
    pois = ad.tsum(ad.concat(pois_rows, axis=0) * mask)
    kl = ad.tsum(ad.concat(kl_rows, axis=0) * mask)
    sent_theta = [ad.concat(theta_rows[l], axis=0)[flat] for l in range(L)]
    word = ad.tsum(lm.loglik(batch.inputs, batch.targets, batch.token_mask, sent_theta, masks))
    thetas = [np.stack([t.data for t in theta_rows[l]], axis=1) for l in range(L)]
    return ElboTerms(pois + word - kl, pois, word, kl, thetas, batch.n_tokens)


def _elbo_nonrecurrent(batch, encoder, lm, topic, noise, masks) -> ElboTerms:
    rows = batch.sent_index
    ctx = batch.contexts[rows[:, 0], rows[:, 1]]
    eps = [noise[l][rows[:, 0], rows[:, 1]] for l in range(topic.L)]
    total, pois, word, kl, theta = gbn_elbo(ctx, batch.inputs, batch.targets, batch.token_mask,
                                            encoder, lm, topic, eps, masks)
    m, J, _ = batch.contexts.shape
    thetas = []
    for l in range(topic.L):
        full = np.ones((m, J, topic.K[l]))
        full[rows[:, 0], rows[:, 1]] = theta[l].data
        thetas.append(full)
    return ElboTerms(total, pois, word, kl, thetas, batch.n_tokens)


def posterior_thetas(batch_contexts: np.ndarray, doc_mask: np.ndarray, encoder: Encoder,
                     topic: TopicModelParams, mean: bool = True, rng=None) -> list:
    """Per-layer (m, J, K_l) topic weights from the encoder, no graph recorded.

    Uses Weibull means by default, or fresh samples from ``rng``.
    """
    m, J, _ = batch_contexts.shape
    L = topic.L
    out = [np.zeros((m, J, k)) for k in topic.K]
    if not topic.recurrent:
        flat = batch_contexts.reshape(m * J, -1)
        noise = None
        if not mean:
            noise = [np.clip(rng.random((m * J, k)), NOISE_CLIP, 1 - NOISE_CLIP) for k in topic.K]
        theta, _, _ = encode_ladder_gbn(encoder, flat, topic, noise, mean=mean)
        return [theta[l].data.reshape(m, J, -1) for l in range(L)]
    h_prev = None
    for j in range(J):
        hs, ks, lams = encoder.encode_step(batch_contexts[:, j], h_prev)
        for l in range(L):
            th = weibull_mean(ks[l], lams[l]) if mean else sample_posterior(ks[l], lams[l], rng)
            out[l][:, j] = th.data
        h_prev = hs
    return out
