"""Random variates for the gamma/Poisson machinery.

All samplers take an explicit ``numpy.random.Generator``; use :func:`make_rng`
to build one on the counter-based Philox bit generator so independent
streams can be spawned reproducibly.
"""
from __future__ import annotations

import numpy as np

SIMPLEX_TOL = 1e-9


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child generators, deterministic given the parent state."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def sample_gamma(shape, rate, rng: np.random.Generator):
    """Gamma(shape, rate) draws, elementwise over broadcast arguments.

    Shapes below one are boosted: draw with ``shape + 1`` and multiply by
    ``U ** (1 / shape)``. The result is floored at the smallest positive
    double so draws stay strictly positive.
    """
    shape = np.asarray(shape, dtype=np.float64)
    rate = np.asarray(rate, dtype=np.float64)
    if np.any(~(shape > 0)) or np.any(~(rate > 0)):
        raise ValueError("gamma shape and rate must be positive")
    shape, rate = np.broadcast_arrays(shape, rate)
    small = shape < 1.0
    g = rng.standard_gamma(np.where(small, shape + 1.0, shape))
    log_out = np.log(g) - np.log(rate)
    if np.any(small):
        u = rng.random(shape.shape)
        # combine in log space; tiny shapes send the boost to -inf, i.e. the floor
        with np.errstate(over="ignore", divide="ignore"):
            log_out = log_out + np.where(small, np.log(u) / np.where(small, shape, 1.0), 0.0)
    with np.errstate(under="ignore"):
        out = np.maximum(np.exp(log_out), np.finfo(np.float64).tiny)
    return out if out.ndim else float(out)


def sample_crt(n, r, rng: np.random.Generator):
    """Chinese restaurant table count: sum of Bernoulli(r / (r + i - 1)), i=1..n.

    Vectorised over broadcast ``n`` and ``r``.
    """
    n = np.asarray(n)
    r = np.asarray(r, dtype=np.float64)
    if np.any(n < 0):
        raise ValueError("CRT customer count must be nonnegative")
    n, r = np.broadcast_arrays(n.astype(np.int64), r)
    out = np.zeros(n.shape, dtype=np.int64)
    nmax = int(n.max()) if n.size else 0
    if nmax == 0:
        return out if out.ndim else int(out)
    if np.any(~(r[n > 0] > 0)):
        raise ValueError("CRT concentration must be positive")
    flat_n = n.ravel()
    flat_r = r.ravel()
    active = np.flatnonzero(flat_n > 0)
    i = np.arange(nmax)[None, :]
    rr = flat_r[active][:, None]
    prob = rr / (rr + i)
    u = rng.random((active.size, nmax))
    hits = (u < prob) & (i < flat_n[active][:, None])
    res = out.ravel()
    res[active] = hits.sum(axis=1)
    out = res.reshape(n.shape)
    return out if out.ndim else int(out)


def crt_pmf(n: int, r: float) -> np.ndarray:
    """Exact CRT(n, r) law by convolving the Bernoulli chain."""
    pmf = np.array([1.0])
    for i in range(1, n + 1):
        p = r / (r + i - 1)
        pmf = np.convolve(pmf, [1.0 - p, p])
    return pmf


def sample_multinomial(n: int, p, rng: np.random.Generator) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if n < 0:
        raise ValueError("multinomial count must be nonnegative")
    if np.any(p < 0) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"invalid probability vector (sum={p.sum()!r})")
    if n == 0:
        return np.zeros(p.shape, dtype=np.int64)
    # numpy's binomial chain rejects sums a hair above one
    return rng.multinomial(int(n), p / p.sum()).astype(np.int64)


def sample_dirichlet(alpha, rng: np.random.Generator) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(~(alpha > 0)):
        raise ValueError("Dirichlet concentration must be positive")
    g = np.atleast_1d(sample_gamma(alpha, 1.0, rng))
    return g / g.sum(axis=-1, keepdims=True)


def sample_poisson(rate, rng: np.random.Generator):
    rate = np.asarray(rate, dtype=np.float64)
    if np.any(rate < 0):
        raise ValueError("Poisson rate must be nonnegative")
    out = rng.poisson(rate)
    return out if np.ndim(out) else int(out)


def weibull_from_uniform(eps, k, lam):
    """Weibull(k, lam) variate from uniform noise: lam * (-ln(1 - eps)) ** (1/k)."""
    eps = np.asarray(eps, dtype=np.float64)
    if np.any(~((eps > 0) & (eps < 1))):
        raise ValueError("uniform noise must lie in the open interval (0, 1)")
    return lam * (-np.log1p(-eps)) ** (1.0 / k)


def weibull_partials(eps, k, lam):
    """Analytic (d/dk, d/dlam) of :func:`weibull_from_uniform` at fixed noise."""
    base = -np.log1p(-np.asarray(eps, dtype=np.float64))
    w = base ** (1.0 / k)
    return -lam * w * np.log(base) / k**2, w
