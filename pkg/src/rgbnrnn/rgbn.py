"""The recurrent gamma belief network: parameters, ancestral sampling, densities.

Layer ``l`` topic weights of sentence ``j`` are gamma distributed with rate
``tau0`` and shape ``Phi[l+1] @ theta[j, l+1] + Pi[l] @ theta[j-1, l]``;
the top layer drops the hierarchical term (and uses ``nu`` at ``j = 1``),
and contexts are Poisson with rate ``Phi[0] @ theta[j, 0]``. Layers are
0-based in code.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .randvar import SIMPLEX_TOL, sample_dirichlet, sample_gamma, sample_poisson

PROB_FLOOR = 1e-10


@dataclass
class TopicModelParams:
    Phi: list            # Phi[0] is V_c x K_1, Phi[l] is K_l x K_{l+1}
    Pi: list             # Pi[l] is K_l x K_l
    tau0: float = 1.0
    eta0: float = 0.01
    eta_pi: float = 0.01
    recurrent: bool = True
    nu: np.ndarray = field(default=None)

    def __post_init__(self):
        self.Phi = [np.asarray(p, dtype=np.float64) for p in self.Phi]
        self.Pi = [np.asarray(p, dtype=np.float64) for p in self.Pi]
        if self.nu is None:
            self.nu = np.ones(self.K[-1])
        self.validate()

    @property
    def L(self) -> int:
        return len(self.Phi)

    @property
    def K(self) -> list[int]:
        return [p.shape[1] for p in self.Phi]

    @property
    def Vc(self) -> int:
        return self.Phi[0].shape[0]

    def validate(self) -> None:
        if not self.tau0 > 0:
            raise ValueError("tau0 must be positive")
        if len(self.Pi) != self.L:
            raise ValueError(f"need one transition matrix per layer, got {len(self.Pi)} for {self.L}")
        for l in range(self.L):
            if l and self.Phi[l].shape[0] != self.Phi[l - 1].shape[1]:
                raise ValueError(f"Phi[{l}] has {self.Phi[l].shape[0]} rows, expected {self.Phi[l - 1].shape[1]}")
            if self.Pi[l].shape != (self.K[l], self.K[l]):
                raise ValueError(f"Pi[{l}] must be {self.K[l]}x{self.K[l]}, got {self.Pi[l].shape}")
            for name, m in (("Phi", self.Phi[l]), ("Pi", self.Pi[l])):
                check_simplex_columns(m, f"{name}[{l}]")

    @classmethod
    def init_random(cls, Vc: int, K, rng, tau0=1.0, eta0=0.01, eta_pi=0.01, recurrent=True):
        """Columns drawn from the symmetric Dirichlet priors."""
        dims = [Vc] + list(K)
        Phi = [project_simplex(sample_dirichlet(np.full((dims[l + 1], dims[l]), eta0), rng).T)
               for l in range(len(K))]
        Pi = [project_simplex(sample_dirichlet(np.full((k, k), eta_pi), rng).T) for k in K]
        return cls(Phi, Pi, tau0, eta0, eta_pi, recurrent)

    def copy(self) -> "TopicModelParams":
        return TopicModelParams([p.copy() for p in self.Phi], [p.copy() for p in self.Pi],
                                self.tau0, self.eta0, self.eta_pi, self.recurrent, self.nu.copy())


def check_simplex_columns(m: np.ndarray, name: str = "matrix", tol: float = SIMPLEX_TOL) -> None:
    if not np.all(np.isfinite(m)) or np.any(m < 0):
        raise ValueError(f"{name} has negative or non-finite entries")
    err = np.abs(m.sum(axis=0) - 1.0).max()
    if err > tol:
        raise ValueError(f"{name} columns are off the simplex by {err:.3g}")


def project_simplex(m: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    """Clamp to ``floor`` and renormalise each column, keeping every entry >= ``floor``.

    Floored entries stay at ``floor``; the remaining mass is rescaled over
    the other entries, repeating if the rescale pushes any of them under.
    """
    m = np.maximum(np.asarray(m, dtype=np.float64), floor)
    low = m <= floor
    for _ in range(m.shape[0] + 1):
        free = np.where(low, 0.0, m)
        room = 1.0 - floor * low.sum(axis=0, keepdims=True)
        total = free.sum(axis=0, keepdims=True)
        scale = np.divide(room, total, out=np.ones_like(total), where=total > 0)
        m = np.where(low, floor, m * scale)
        new_low = low | (m < floor)
        if np.array_equal(new_low, low):
            break
        low = new_low
    return m


@dataclass
class ThetaPath:
    layers: list  # layers[l] is a (J, K_l) array

    @property
    def J(self) -> int:
        return self.layers[0].shape[0]

    def at(self, j: int, l: int) -> np.ndarray:
        return self.layers[l][j]


def prior_shape(params: TopicModelParams, theta_j, theta_prev, l: int):
    """Gamma shape of layer ``l`` given the sentence's upper layer and the previous sentence.

    ``theta_j``/``theta_prev`` are per-layer lists of row-vectors (or batched
    rows); ``theta_prev`` is ``None`` at the first sentence.
    """
    top = l == params.L - 1
    if top:
        if theta_prev is None or not params.recurrent:
            like = theta_j[l] if theta_j[l] is not None else params.nu
            return np.broadcast_to(params.nu, np.shape(like)).astype(np.float64)
        return theta_prev[l] @ params.Pi[l].T
    shape = theta_j[l + 1] @ params.Phi[l + 1].T
    if theta_prev is not None and params.recurrent:
        shape = shape + theta_prev[l] @ params.Pi[l].T
    return shape


def generate_theta_path(params: TopicModelParams, J: int, rng) -> ThetaPath:
    if J < 1:
        raise ValueError("J must be at least 1")
    layers = [np.zeros((J, k)) for k in params.K]
    prev = None
    for j in range(J):
        cur = [None] * params.L
        for l in reversed(range(params.L)):
            cur[l] = np.atleast_1d(sample_gamma(prior_shape(params, cur, prev, l), params.tau0, rng))
            layers[l][j] = cur[l]
        prev = cur
    return ThetaPath(layers)


def generate_counts(params: TopicModelParams, path: ThetaPath, rng) -> list[np.ndarray]:
    rates = path.layers[0] @ params.Phi[0].T
    return [np.asarray(sample_poisson(r, rng), dtype=np.int64) for r in rates]


def poisson_loglik(d, rate) -> float:
    """Sum of Poisson log-pmfs; returns ``-inf`` for a positive count at zero rate."""
    d = np.asarray(d, dtype=np.float64)
    rate = np.asarray(rate, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("counts must be nonnegative")
    if np.any(rate < 0):
        raise ValueError("rates must be nonnegative")
    if np.any((rate == 0) & (d > 0)):
        return -np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(d > 0, d * np.log(np.where(rate > 0, rate, 1.0)), 0.0)
    return float(np.sum(term - rate - gammaln(d + 1)))


def gamma_loglik(theta, shape, rate) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    shape = np.asarray(shape, dtype=np.float64)
    return float(np.sum(shape * np.log(rate) - gammaln(shape) + (shape - 1) * np.log(theta) - rate * theta))


def projected_topics(params: TopicModelParams, l: int) -> np.ndarray:
    """Word-space projection Phi[0] @ ... @ Phi[l] of the layer-``l`` topics."""
    out = params.Phi[0]
    for m in params.Phi[1:l + 1]:
        out = out @ m
    return out


def export_topic_hierarchy(params: TopicModelParams, tm_tokens, top_n: int = 10,
                           weight_threshold: float = 0.1) -> list[dict]:
    """One record per topic: top words plus hierarchical and temporal edges.

    A hierarchical edge ``child -> parent`` is kept when the loading
    ``Phi[l][child, parent]`` exceeds the threshold; a temporal edge
    ``from -> to`` when ``Pi[l][to, from]`` does.
    """
    records = []
    for l in range(params.L):
        proj = projected_topics(params, l)
        for k in range(params.K[l]):
            col = proj[:, k]
            top = np.argsort(-col, kind="stable")[:top_n]
            children = []
            if l > 0:
                children = [{"layer": l, "topic_id": int(c), "weight": float(params.Phi[l][c, k])}
                            for c in np.flatnonzero(params.Phi[l][:, k] > weight_threshold)]
            temporal = [{"layer": l + 1, "topic_id": int(t), "weight": float(params.Pi[l][t, k])}
                        for t in np.flatnonzero(params.Pi[l][:, k] > weight_threshold)]
            records.append({
                "layer": l + 1,
                "topic_id": k,
                "top_words": [tm_tokens[i] for i in top],
                "top_weights": [float(col[i]) for i in top],
                "hierarchical_edges": children,
                "temporal_edges": temporal,
            })
    return records


def write_topic_hierarchy(records: list[dict], path) -> None:
    Path(path).write_text(json.dumps(records, indent=1) + "\n", encoding="utf-8")
