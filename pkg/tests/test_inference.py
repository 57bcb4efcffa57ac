import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, special, stats

from rgbnrnn import autodiff as ad
from rgbnrnn.autodiff import Tensor
from rgbnrnn.config import TrainConfig
from rgbnrnn.corpus import Corpus, Vocab, build_vocab, encode_documents, make_batch
from rgbnrnn.inference import (Encoder, EncoderConfig, elbo, encode_ladder_gbn, gbn_elbo,
                               kl_weibull_gamma, sample_posterior, weibull_mean, weibull_sample)
from rgbnrnn.model import RGBNRNN
from rgbnrnn.randvar import make_rng
from rgbnrnn.rgbn import TopicModelParams, gamma_loglik, poisson_loglik

E1 = 1 - math.exp(-1)


def zero_encoder(Vc=4, K=(3, 2), recurrent=True):
    enc = Encoder.init(EncoderConfig(Vc, list(K), recurrent), make_rng(0))
    for p in enc.params.values():
        p.data[...] = 0.0
    return enc


class TestEncoder:
    def test_zero_weights_give_log2(self):
        enc = zero_encoder()
        hs, ks, lams = enc.encode_step(np.ones((2, 4)), None)
        for k, lam in zip(ks, lams):
            assert np.allclose(k.data, math.log(2)) and np.allclose(lam.data, math.log(2))

    def test_initial_state_is_zero(self):
        enc = Encoder.init(EncoderConfig(5, [3, 2]), make_rng(1))
        d = np.random.default_rng(1).poisson(2.0, (2, 5)).astype(float)
        a = enc.encode_step(d, None)
        b = enc.encode_step(d, [Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2)))])
        for x, y in zip(a, b):
            assert all(np.array_equal(u.data, v.data) for u, v in zip(x, y))

    def test_shared_prefix_gives_shared_states(self):
        enc = Encoder.init(EncoderConfig(5, [3, 2]), make_rng(2))
        rng = np.random.default_rng(2)
        docs = rng.poisson(2.0, (3, 5)).astype(float)
        other = docs.copy()
        other[2] += 4.0
        h_a = h_b = None
        for j in range(3):
            h_a, _, lam_a = enc.encode_step(docs[j:j + 1], h_a)
            h_b, _, lam_b = enc.encode_step(other[j:j + 1], h_b)
            same = all(np.array_equal(x.data, y.data) for x, y in zip(lam_a, lam_b))
            assert same == (j < 2)

    def test_outputs_positive(self):
        enc = Encoder.init(EncoderConfig(5, [3, 2]), make_rng(3))
        _, ks, lams = enc.encode_step(np.random.default_rng(3).poisson(30.0, (4, 5)).astype(float))
        assert all(np.all(k.data > 0) for k in ks) and all(np.all(l.data > 0) for l in lams)
        assert all(k.shape == (4, 1) for k in ks)


class TestWeibullSampling:
    def test_unit_noise_returns_scale(self):
        lam = np.array([[0.3, 2.0, 7.5]])
        assert np.allclose(weibull_sample(Tensor([[1.7]]), Tensor(lam), np.full((1, 3), E1)).data, lam)

    def test_monte_carlo_mean(self):
        k, lam = 1.5, 2.0
        x = sample_posterior(Tensor(np.full((100_000, 1), k)), Tensor(np.full((100_000, 1), lam)),
                             make_rng(0)).data.ravel()
        want = lam * math.gamma(1 + 1 / k)
        assert abs(x.mean() - want) <= 3 * x.std() / math.sqrt(x.size)
        assert weibull_mean(Tensor(k), Tensor(lam)).item() == pytest.approx(want, rel=1e-12)

    @given(st.floats(0.01, 0.99), st.floats(0.2, 5), st.floats(0.1, 5))
    def test_scale_derivative(self, eps, k, lam):
        lam_t = Tensor(np.array([lam]), requires_grad=True)
        ad.backward(ad.tsum(weibull_sample(Tensor([k]), lam_t, np.array([eps]))))
        want = (-math.log(1 - eps)) ** (1 / k)
        h = 1e-6
        fd = (weibull_sample(k, lam + h, eps).item() - weibull_sample(k, lam - h, eps).item()) / (2 * h)
        assert lam_t.grad[0] == pytest.approx(want, rel=1e-12)
        assert fd == pytest.approx(want, rel=1e-7)


class TestKl:
    def test_nonnegative_on_random_draws(self):
        rng = np.random.default_rng(0)
        k, lam, a = (np.exp(rng.uniform(-2, 2, 1000)) for _ in range(3))
        b = float(np.exp(rng.uniform(-2, 2)))
        assert np.all(kl_weibull_gamma(k, lam, a, b).data >= -1e-12)
        for kk, ll, aa, bb in zip(k[:200], lam[:200], a[:200], np.exp(rng.uniform(-2, 2, 200))):
            assert kl_weibull_gamma(kk, ll, aa, bb).item() >= -1e-12

    def test_matches_monte_carlo(self):
        k, lam, a, b = 2.0, 1.0, 2.0, 1.0
        x = stats.weibull_min.rvs(k, scale=lam, size=1_000_000, random_state=np.random.default_rng(1))
        mc = np.mean(stats.weibull_min.logpdf(x, k, scale=lam) - stats.gamma.logpdf(x, a, scale=1 / b))
        assert kl_weibull_gamma(k, lam, a, b).item() == pytest.approx(mc, rel=0.01)

    def test_matches_quadrature(self):
        k, lam, a, b = 0.7, 1.8, 0.4, 2.5
        f = lambda x: stats.weibull_min.pdf(x, k, scale=lam) * (
            stats.weibull_min.logpdf(x, k, scale=lam) - stats.gamma.logpdf(x, a, scale=1 / b))
        want = integrate.quad(f, 0, np.inf, limit=200)[0]
        assert kl_weibull_gamma(k, lam, a, b).item() == pytest.approx(want, rel=1e-6)

    @given(st.floats(0.3, 5), st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0.1, 5))
    def test_scale_derivative(self, k, lam, a, b):
        lam_t = Tensor(np.array([lam]), requires_grad=True)
        ad.backward(ad.tsum(kl_weibull_gamma(np.array([k]), lam_t, np.array([a]), b)))
        h = 1e-5 * lam
        fd = (kl_weibull_gamma(k, lam + h, a, b).item() - kl_weibull_gamma(k, lam - h, a, b).item()) / (2 * h)
        assert abs(lam_t.grad[0] - fd) <= 1e-6 * max(abs(fd), 1e-2)

    @pytest.mark.parametrize("args", [(0.0, 1, 1, 1), (1, -1, 1, 1), (1, 1, 0, 1), (1, 1, 1, 0)])
    def test_rejects_nonpositive(self, args):
        with pytest.raises(ValueError):
            kl_weibull_gamma(*args)


def tiny_setup(Vc=1, K=(1,), recurrent=True, seed=0, words=("a",), sentences=(("a", "a", "a"),),
               context=None):
    vocab = build_vocab(list(words), min_count=1, trim_fraction=0.0, stopwords=frozenset())
    cfg = TrainConfig(embed_dim=3, lm_hidden=tuple(2 for _ in K), topics=K, recurrent=recurrent,
                      dropout=0.0, seed=seed)
    model = RGBNRNN.init(vocab, cfg, make_rng(seed))
    doc = encode_documents([list(map(list, sentences))], vocab)[0]
    batch = make_batch([doc], vocab, "leave-one-out")
    if context is not None:
        batch.contexts[...] = context
    return model, batch


def test_elbo_is_sum_of_independent_terms():
    model, batch = tiny_setup(context=2.0)
    noise = [np.full((1, 1, 1), E1)]
    terms = elbo(batch, model.encoder, model.lm, model.topic, noise)
    _, ks, lams = model.encoder.encode_step(batch.contexts[:, 0], None)
    theta = lams[0].data  # unit noise gives theta = lam
    pois = poisson_loglik(batch.contexts[0, 0], model.topic.Phi[0] @ theta[0])
    word = model.lm.loglik(batch.inputs, batch.targets, batch.token_mask, [theta]).data.sum()
    kl = kl_weibull_gamma(ks[0].data, lams[0].data, model.topic.nu, model.topic.tau0).data.sum()
    assert terms.poisson.item() == pytest.approx(pois, abs=1e-12)
    assert terms.word.item() == pytest.approx(word, abs=1e-12)
    assert terms.kl.item() == pytest.approx(kl, abs=1e-12)
    assert terms.total.item() == pytest.approx(pois + word - kl, abs=1e-12)


def test_elbo_below_log_marginal():
    model, batch = tiny_setup(context=3.0, seed=4)
    topic, lm = model.topic, model.lm
    d = batch.contexts[0, 0]

    def log_joint(t):
        word = lm.loglik(batch.inputs, batch.targets, batch.token_mask, [np.array([[t]])]).data.sum()
        return (poisson_loglik(d, topic.Phi[0] @ np.array([t]))
                + gamma_loglik([t], topic.nu, topic.tau0) + word)

    shift = log_joint(1.0)
    val, _ = integrate.quad(lambda t: math.exp(log_joint(t) - shift), 0, np.inf, limit=200)
    log_marginal = shift + math.log(val)

    rng = make_rng(5)
    draws = np.array([elbo(batch, model.encoder, lm, topic, [rng.random((1, 1, 1))]).total.item()
                      for _ in range(1000)])
    assert draws.mean() - 3 * draws.std() / math.sqrt(draws.size) <= log_marginal

    # the single-sample estimator's standard error shrinks like 1 / sqrt(n)
    small = draws.reshape(100, 10).mean(axis=1).std(ddof=1)
    large = draws.reshape(25, 40).mean(axis=1).std(ddof=1)
    assert 1.4 < small / large < 2.8


def test_ladder_single_layer_is_plain_weibull():
    model, batch = tiny_setup(recurrent=False, context=2.0)
    d = batch.contexts[0]
    noise = [np.array([[0.3]])]
    theta, k_eff, lams = encode_ladder_gbn(model.encoder, d, model.topic, noise)
    _, ks, lam_plain = model.encoder.encode_step(d, None)
    assert np.allclose(theta[0].data, weibull_sample(ks[0], lam_plain[0], noise[0]).data)


def toy_model(recurrent=True, seed=0, dropout=0.0):
    words = [f"w{i}" for i in range(16)]
    stop = frozenset(words[10:])
    rng = np.random.default_rng(seed)
    raw = [[[words[i] for i in rng.integers(0, 16, rng.integers(2, 6))] for _ in range(3)] for _ in range(3)]
    vocab = build_vocab(words + [w for d in raw for s in d for w in s], min_count=1, trim_fraction=0.0,
                        stopwords=stop)
    assert vocab.V == 20 and vocab.Vc == 10
    cfg = TrainConfig(embed_dim=5, lm_hidden=(8, 6), topics=(4, 3), recurrent=recurrent, dropout=dropout,
                      seed=seed)
    model = RGBNRNN.init(vocab, cfg, make_rng(seed))
    batch = make_batch(encode_documents(raw, vocab), vocab, "leave-one-out")
    return model, batch


def test_ladder_shape_increases_and_top_layer_wiring():
    model, batch = toy_model(recurrent=False)
    d = batch.contexts.reshape(-1, 10)
    noise = [np.random.default_rng(0).uniform(0.05, 0.95, (d.shape[0], k)) for k in (4, 3)]
    theta, k_eff, lams = encode_ladder_gbn(model.encoder, d, model.topic, noise)
    _, ks, _ = model.encoder.encode_step(d, None)
    assert np.all(k_eff[0].data > ks[0].data)
    assert np.allclose(theta[1].data, weibull_sample(ks[1], lams[1], noise[1]).data)


def test_non_recurrent_elbo_equals_independent_pair_elbo():
    model, batch = toy_model(recurrent=False)
    rng = np.random.default_rng(3)
    noise = [rng.uniform(0.05, 0.95, (3, 3, k)) for k in (4, 3)]
    terms = elbo(batch, model.encoder, model.lm, model.topic, noise)
    rows = batch.sent_index
    ctx = batch.contexts[rows[:, 0], rows[:, 1]]
    eps = [n[rows[:, 0], rows[:, 1]] for n in noise]
    total = gbn_elbo(ctx, batch.inputs, batch.targets, batch.token_mask, model.encoder, model.lm,
                     model.topic, eps)[0]
    assert terms.total.item() == total.item()


def test_per_sentence_kl_nonnegative():
    model, batch = toy_model()
    rng = np.random.default_rng(4)
    for _ in range(5):
        noise = [rng.random((3, 3, k)) for k in (4, 3)]
        assert elbo(batch, model.encoder, model.lm, model.topic, noise).kl.item() >= 0


@pytest.mark.parametrize("recurrent", [True, False])
def test_end_to_end_gradients(recurrent):
    model, batch = toy_model(recurrent=recurrent, dropout=0.4)
    rng = np.random.default_rng(6)
    noise = [rng.uniform(0.05, 0.95, (3, 3, k)) for k in (4, 3)]
    masks = model.lm.dropout_masks(make_rng(6), batch.inputs.shape[0], batch.inputs.shape[1])
    f = lambda: -elbo(batch, model.encoder, model.lm, model.topic, noise, masks).total / batch.n_tokens
    params = list(model.neural_params().values())
    err = ad.grad_check(f, params, h=1e-5, max_coords=6, rng=np.random.default_rng(0), atol=1e-5)
    assert err < 1e-4
