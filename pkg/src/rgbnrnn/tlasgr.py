"""Count augmentation and Fisher-preconditioned Langevin updates for Phi and Pi.

Given posterior samples of the topic weights, latent counts are propagated
backward in sentence order and upward through the layers (multinomial
thinning, CRT draws and a two-way temporal/hierarchical split). Aggregated
counts then drive one preconditioned stochastic-gradient step per column of
every loading and transition matrix, followed by a projection back onto the
probability simplex.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rgbn import PROB_FLOOR, TopicModelParams, project_simplex
from .randvar import sample_crt


class AugmentationError(ValueError):
    pass


@dataclass
class AuxCounts:
    """Latent counts of one document (layers 0-based, sentences on the last axis).

    ``A[l]`` is rows_l x K_l x J with rows_0 = V_c; ``Z[l]`` is K_l x K_l x J
    with ``Z[l][k, k_prev, j]`` the share of topic ``k`` at sentence ``j``
    attributed to topic ``k_prev`` at ``j - 1``; ``x[l]`` is rows_l x J, the
    counts entering layer ``l`` (``x[0]`` is the context). ``crt[l]`` and
    ``temporal[l]`` (K_l x J) hold the CRT table counts and their temporal part.
    """
    A: list
    Z: list
    x: list
    crt: list
    temporal: list

    @property
    def J(self) -> int:
        return self.x[0].shape[1]


def _thin(counts: np.ndarray, weights: np.ndarray, rng, where: str) -> np.ndarray:
    """Multinomially split ``counts[r]`` over row ``weights[r]`` for every row."""
    out = np.zeros(weights.shape, dtype=np.int64)
    rows = np.flatnonzero(counts > 0)
    if rows.size == 0:
        return out
    w = weights[rows]
    tot = w.sum(axis=1, keepdims=True)
    bad = np.flatnonzero(~(tot[:, 0] > 0) | ~np.isfinite(tot[:, 0]))
    if bad.size:
        raise AugmentationError(f"zero total multinomial weight at {where}, row {int(rows[bad[0]])}")
    out[rows] = rng.multinomial(counts[rows], w / tot)
    return out


def augment_counts(d: np.ndarray, theta: list, params: TopicModelParams, rng) -> AuxCounts:
    """Backward/upward augmentation for one document.

    ``d`` is J x V_c; ``theta[l]`` is J x K_l (strictly positive).
    """
    d = np.asarray(d, dtype=np.int64)
    J = d.shape[0]
    L, K = params.L, params.K
    rows = [params.Vc] + K[:-1]
    A = [np.zeros((rows[l], K[l], J), dtype=np.int64) for l in range(L)]
    Z = [np.zeros((K[l], K[l], J), dtype=np.int64) for l in range(L)]
    x = [np.zeros((rows[l], J), dtype=np.int64) for l in range(L)]
    crt = [np.zeros((K[l], J), dtype=np.int64) for l in range(L)]
    temporal = [np.zeros((K[l], J), dtype=np.int64) for l in range(L)]
    x[0][:] = d.T
    for j in reversed(range(J)):
        for l in range(L):
            where = f"layer {l + 1}, sentence {j + 1}"
            A[l][:, :, j] = _thin(x[l][:, j], params.Phi[l] * theta[l][j], rng, where)
            top = l == L - 1
            if top and not params.recurrent:
                continue
            n = A[l][:, :, j].sum(axis=0)
            if j + 1 < J:
                n = n + Z[l][:, :, j + 1].sum(axis=0)
            if j > 0 and params.recurrent:
                p1 = params.Pi[l] @ theta[l][j - 1]
            else:
                p1 = np.zeros(K[l])
            if top:
                p2 = params.nu if j == 0 else np.zeros(K[l])
            else:
                p2 = params.Phi[l + 1] @ theta[l + 1][j]
            r = params.tau0 * (p1 + p2)
            tables = np.asarray(sample_crt(n, np.where(n > 0, r, 1.0), rng), dtype=np.int64)
            crt[l][:, j] = tables
            if np.any(p1 > 0):
                tmp = rng.binomial(tables, np.divide(p1, p1 + p2, out=np.zeros_like(p1), where=(p1 + p2) > 0))
            else:
                tmp = np.zeros_like(tables)
            temporal[l][:, j] = tmp
            if j > 0 and params.recurrent:
                Z[l][:, :, j] = _thin(tmp, params.Pi[l] * theta[l][j - 1], rng, where + " (transition)")
            if not top:
                x[l + 1][:, j] = tables - tmp
    return AuxCounts(A, Z, x, crt, temporal)


def aggregate(aux_list) -> tuple[list, list]:
    """Sum A and Z over sentences and documents: per-layer count matrices."""
    L = len(aux_list[0].A)
    A = [sum(a.A[l].sum(axis=2) for a in aux_list) for l in range(L)]
    Z = [sum(a.Z[l].sum(axis=2) for a in aux_list) for l in range(L)]
    return A, Z


@dataclass
class FimAccumulators:
    eps0: float = 0.1
    kappa: float = 0.7
    decay: float = 0.9
    floor: float = 1e-6
    rho: float = 1.0
    n: int = 0
    P: list = field(default=None)
    M: list = field(default=None)

    @property
    def eps(self) -> float:
        return self.eps0 * max(self.n, 1) ** (-self.kappa)


def advance_schedule(fim: FimAccumulators, A_tilde, Z_tilde, params: TopicModelParams) -> FimAccumulators:
    """Step the counter and fold this batch's scaled counts into P and M.

    P and M estimate the diagonal Fisher information of each column by an
    exponentially weighted average of ``rho * count + prior mass``; the
    first observation initialises them.
    """
    fim.n += 1
    P_obs = [fim.rho * a.sum(axis=0) + a.shape[0] * params.eta0 for a in A_tilde]
    M_obs = [fim.rho * z.sum(axis=0) + z.shape[0] * params.eta_pi for z in Z_tilde]
    if fim.P is None:
        fim.P, fim.M = P_obs, M_obs
    else:
        fim.P = [fim.decay * p + (1 - fim.decay) * o for p, o in zip(fim.P, P_obs)]
        fim.M = [fim.decay * m + (1 - fim.decay) * o for m, o in zip(fim.M, M_obs)]
    fim.P = [np.maximum(p, fim.floor) for p in fim.P]
    fim.M = [np.maximum(m, fim.floor) for m in fim.M]
    return fim


def simplex_step(cols: np.ndarray, counts: np.ndarray, prior, precond: np.ndarray, eps: float,
                 rho: float, rng, noise: bool = True, floor: float = PROB_FLOOR) -> np.ndarray:
    """One preconditioned Langevin step for every column of ``cols``.

    ``prior`` is the Dirichlet concentration (scalar or per-row vector). A
    zero step size returns the columns untouched.
    """
    if eps == 0:
        return cols.copy()
    prior = np.broadcast_to(np.asarray(prior, dtype=np.float64), (cols.shape[0],))[:, None]
    target = rho * counts + prior
    drift = target - target.sum(axis=0, keepdims=True) * cols
    step = eps / precond
    new = cols + step * drift
    if noise:
        root = np.sqrt(cols)
        g = root * rng.standard_normal(cols.shape)
        new = new + np.sqrt(2 * step) * (g - cols * g.sum(axis=0, keepdims=True))
    return new if floor is None else project_simplex(new, floor)


def update_phi(params: TopicModelParams, A_tilde, fim: FimAccumulators, rng, noise: bool = True):
    for l in range(params.L):
        new = simplex_step(params.Phi[l], A_tilde[l], params.eta0, fim.P[l], fim.eps, fim.rho, rng, noise)
        _check_finite(new, "Phi", l)
        params.Phi[l] = new
    return params.Phi


def update_pi(params: TopicModelParams, Z_tilde, fim: FimAccumulators, rng, noise: bool = True):
    for l in range(params.L):
        new = simplex_step(params.Pi[l], Z_tilde[l], params.eta_pi, fim.M[l], fim.eps, fim.rho, rng, noise)
        _check_finite(new, "Pi", l)
        params.Pi[l] = new
    return params.Pi


def _check_finite(m: np.ndarray, name: str, l: int) -> None:
    if not np.all(np.isfinite(m)):
        col = int(np.flatnonzero(~np.isfinite(m).all(axis=0))[0])
        raise FloatingPointError(f"non-finite {name} update at layer {l + 1}, column {col}")


def tlasgr_step(params: TopicModelParams, contexts: list, thetas: list, fim: FimAccumulators,
                rng, noise: bool = True) -> list[AuxCounts]:
    """Augment every document, then update Phi (and Pi when recurrent)."""
    aux = [augment_counts(d, th, params, rng) for d, th in zip(contexts, thetas)]
    A_tilde, Z_tilde = aggregate(aux)
    advance_schedule(fim, A_tilde, Z_tilde, params)
    update_phi(params, A_tilde, fim, rng, noise)
    if params.recurrent:
        update_pi(params, Z_tilde, fim, rng, noise)
    return aux
