"""
Ecological-inference models for two-round elections.

Each polling station k holds an I x J transition table X^k (first-round
option i, second-round option j) of which only the margins are observed.
Three parameterizations of X^k ~ M(n^k, p^k) are provided:

- ``model1``: one table-wide softmax, p = softmax(0, theta), d_theta = IJ - 1.
- ``model2``: p_ij = (r_i / n) * p_{j|i} with the observed first-round
  shares r_i / n and a per-row softmax p_{.|i} = softmax(0, theta_i).
- ``model3``: model2 with station-level logits theta_i + beta_i * C^k.

Option index 0 is the reference category in every softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax, softmax
from scipy.stats import norm

from .aggregation import MarginsMap, margins_matrix
from .estimator import (EstimatorConfig, LikelihoodDiagnostics, batch_estimates,
                        gaussian_model_logpdf_batch, summarize)
from .models import MultinomialModel, MultinomialStack

VARIANTS = ("model1", "model2", "model3")


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    I: int
    J: int
    prior_sigma2: float = 2.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}")
        if self.I < 2 or self.J < 2:
            raise ValueError("I and J must be at least 2")
        if not self.prior_sigma2 > 0:
            raise ValueError("prior_sigma2 must be positive")

    @property
    def d_theta(self):
        if self.variant == "model1":
            return self.I * self.J - 1
        return self.I * (self.J - 1)

    @property
    def n_params(self):
        return 2 * self.d_theta if self.variant == "model3" else self.d_theta

    @property
    def A(self) -> MarginsMap:
        return margins_matrix(self.I, self.J)

    def zeros(self) -> "Theta":
        return Theta.from_flat(self, np.zeros(self.n_params))

    @property
    def param_names(self):
        if self.variant == "model1":
            names = [f"theta_{i + 1}_{j + 1}" for j in range(self.J) for i in range(self.I)]
            return names[1:]
        names = [f"theta_{i + 1}_{j + 1}" for i in range(self.I) for j in range(1, self.J)]
        if self.variant == "model3":
            names += [n.replace("theta", "beta") for n in names]
        return names


@dataclass(frozen=True)
class Theta:
    """Parameter vector; ``beta`` is present for model3 only."""

    theta: np.ndarray
    beta: np.ndarray | None = None

    def flat(self):
        if self.beta is None:
            return np.asarray(self.theta, dtype=float)
        return np.concatenate([self.theta, self.beta]).astype(float)

    @classmethod
    def from_flat(cls, spec: ModelSpec, vec) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got shape {vec.shape}")
        if spec.variant == "model3":
            return cls(vec[:spec.d_theta].copy(), vec[spec.d_theta:].copy())
        return cls(vec.copy())


def _flat(spec, params):
    vec = params.flat() if isinstance(params, Theta) else np.asarray(params, dtype=float)
    if vec.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got shape {vec.shape}")
    return vec


@dataclass(frozen=True)
class StationData:
    station_id: str
    round1: np.ndarray
    round2: np.ndarray
    covariate: float | None = None

    def __post_init__(self):
        r = np.asarray(self.round1, dtype=np.int64)
        s = np.asarray(self.round2, dtype=np.int64)
        if np.any(r < 0) or np.any(s < 0):
            raise ValueError(f"station {self.station_id}: negative counts")
        if r.sum() != s.sum():
            raise ValueError(f"station {self.station_id}: rounds sum to {r.sum()} and {s.sum()}")
        object.__setattr__(self, "round1", r)
        object.__setattr__(self, "round2", s)
        if self.covariate is not None:
            object.__setattr__(self, "covariate", float(self.covariate))

    @property
    def n(self):
        return int(self.round1.sum())

    @property
    def y(self):
        return np.concatenate([self.round1[:-1], self.round2[:-1]])

    def __eq__(self, other):
        if not isinstance(other, StationData):
            return NotImplemented
        return (self.station_id == other.station_id
                and np.array_equal(self.round1, other.round1)
                and np.array_equal(self.round2, other.round2)
                and self.covariate == other.covariate)


class StationArrays:
    """Column arrays for a list of stations, built once per dataset."""

    def __init__(self, stations: Sequence[StationData], I=None, J=None):
        self.stations = list(stations)
        K = len(self.stations)
        self.K = K
        if K:
            self.R = np.stack([s.round1 for s in self.stations]).astype(float)
            self.S = np.stack([s.round2 for s in self.stations]).astype(float)
        else:
            self.R = np.zeros((0, I or 0))
            self.S = np.zeros((0, J or 0))
        self.n = self.R.sum(axis=1)
        self.has_covariate = all(s.covariate is not None for s in self.stations)
        self.C = np.array([s.covariate if s.covariate is not None else np.nan
                           for s in self.stations], dtype=float)
        self.Y = np.concatenate([self.R[:, :-1], self.S[:, :-1]], axis=1)

    def check(self, spec: ModelSpec):
        if self.K and (self.R.shape[1] != spec.I or self.S.shape[1] != spec.J):
            raise ValueError(f"data has {self.R.shape[1]}x{self.S.shape[1]} options, "
                             f"model expects {spec.I}x{spec.J}")
        if self.K and np.any(self.n <= 0):
            raise ValueError("station with zero voters")
        if spec.variant == "model3" and not self.has_covariate:
            raise ValueError("model3 requires a covariate for every station")


def as_arrays(data, spec: ModelSpec | None = None) -> StationArrays:
    arr = data if isinstance(data, StationArrays) else StationArrays(
        data, None if spec is None else spec.I, None if spec is None else spec.J)
    if spec is not None:
        arr.check(spec)
    return arr


# ---------------------------------------------------------------------------
# Cell probabilities
# ---------------------------------------------------------------------------

def _vec_cols(M):
    """Column-major flattening of (..., I, J) tables."""
    return np.swapaxes(M, -1, -2).reshape(M.shape[:-2] + (-1,))


def conditional_logits(spec: ModelSpec, params, covariate=None):
    """Per-row logits (..., I, J) with column 0 pinned to zero (model2/3)."""
    vec = _flat(spec, params)
    I, J = spec.I, spec.J
    theta = vec[:spec.d_theta].reshape(I, J - 1)
    if spec.variant == "model3":
        beta = vec[spec.d_theta:].reshape(I, J - 1)
        c = np.asarray(0.0 if covariate is None else covariate, dtype=float)
        theta = theta + c[..., None, None] * beta
    zeros = np.zeros(np.shape(theta)[:-1] + (1,))
    return np.concatenate([zeros, theta], axis=-1)


def cell_logp(spec: ModelSpec, params, arrays: StationArrays):
    """Log cell probabilities (K, IJ) in column-major order."""
    vec = _flat(spec, params)
    K = arrays.K
    if spec.variant == "model1":
        logp = log_softmax(np.concatenate([[0.0], vec]))
        return np.broadcast_to(logp, (K, logp.size))
    cov = arrays.C if spec.variant == "model3" else None
    logits = conditional_logits(spec, vec, cov)
    log_cond = log_softmax(logits, axis=-1)
    if log_cond.ndim == 2:
        log_cond = np.broadcast_to(log_cond, (K,) + log_cond.shape)
    with np.errstate(divide="ignore"):
        log_share = np.log(arrays.R) - np.log(arrays.n)[:, None]
    return _vec_cols(log_share[:, :, None] + log_cond)


def station_model(spec: ModelSpec, params, station: StationData):
    """The station's multinomial law and its observed margins y.

    Raises ``ValueError`` under model2/3 when a first-round count is zero,
    since the cells of that row have probability zero.  The batched
    likelihood path handles such stations through the zero-margin reduction.
    """
    arrays = as_arrays([station], spec)
    logp = cell_logp(spec, params, arrays)[0]
    return MultinomialModel(station.n, np.exp(logp) / np.exp(logp).sum()), station.y


def station_stack(spec: ModelSpec, params, arrays: StationArrays) -> MultinomialStack:
    return MultinomialStack(np.array(cell_logp(spec, params, arrays)), arrays.n)


def conditional_probs(spec: ModelSpec, params, covariate=None):
    """p_{j|i} as an (I, J) matrix (model1: normalized rows of p)."""
    vec = _flat(spec, params)
    if spec.variant == "model1":
        p = softmax(np.concatenate([[0.0], vec]))
        P = p.reshape(spec.J, spec.I).T
        return P / P.sum(axis=1, keepdims=True)
    return softmax(conditional_logits(spec, vec, covariate), axis=-1)


# ---------------------------------------------------------------------------
# Prior and posterior
# ---------------------------------------------------------------------------

def log_prior(spec: ModelSpec, params) -> float:
    vec = _flat(spec, params)
    return float(np.sum(norm.logpdf(vec, scale=np.sqrt(spec.prior_sigma2))))


def grad_log_prior(spec: ModelSpec, params):
    return -_flat(spec, params) / spec.prior_sigma2


def log_likelihood_estimate(spec: ModelSpec, params, data, cfg: EstimatorConfig,
                            idx=None, A: MarginsMap | None = None):
    """
    Estimated log-likelihood of stations ``idx`` (default: all).

    Station k always draws from stream k of ``cfg.seed``, whether it is
    evaluated alone, in a minibatch, or with the whole dataset.
    """
    arrays = as_arrays(data, spec)
    A = spec.A if A is None else A
    ids = np.arange(arrays.K) if idx is None else np.asarray(idx)
    if ids.size == 0:
        return 0.0, LikelihoodDiagnostics(0, 0, 0, 0, 0, 0)
    stack = station_stack(spec, params, arrays).take(ids)
    res = batch_estimates(stack, A, arrays.Y[ids], cfg, stream_ids=ids)
    return summarize(res)


def log_posterior_estimate(spec: ModelSpec, params, data, A: MarginsMap | None = None,
                           cfg: EstimatorConfig | None = None):
    """log prior + estimated log-likelihood, with likelihood diagnostics."""
    cfg = EstimatorConfig() if cfg is None else cfg
    ll, diag = log_likelihood_estimate(spec, params, data, cfg, A=A)
    return log_prior(spec, params) + ll, diag


def gaussian_log_likelihood(spec: ModelSpec, params, data, idx=None):
    """Log-likelihood under the moment-matched normal approximation of AX."""
    arrays = as_arrays(data, spec)
    ids = np.arange(arrays.K) if idx is None else np.asarray(idx)
    if ids.size == 0:
        return 0.0
    stack = station_stack(spec, params, arrays).take(ids)
    return float(np.sum(gaussian_model_logpdf_batch(stack, spec.A, arrays.Y[ids])))


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def synth_generate(spec: ModelSpec, true_params, K: int, n_per_station,
                   covariate_law: Callable | None = None, seed: int = 0,
                   row_probs=None) -> list[StationData]:
    """
    Simulate K stations from the model.

    model1 draws the whole table from M(n, p).  model2/3 first draw the
    first-round counts r ~ M(n, row_probs) (uniform by default), then each
    row i from M(r_i, p_{.|i}); conditionally on its row sums this is the
    same law as the unconditional model.  A covariate is drawn for every
    station (standard normal unless ``covariate_law(rng, K)`` is given).
    """
    rng = np.random.default_rng(seed)
    n_arr = np.broadcast_to(np.asarray(n_per_station, dtype=np.int64), (K,))
    cov = (rng.standard_normal(K) if covariate_law is None
           else np.asarray(covariate_law(rng, K), dtype=float))
    vec = _flat(spec, true_params)
    I, J = spec.I, spec.J
    rows = np.full(I, 1.0 / I) if row_probs is None else np.asarray(row_probs, dtype=float)
    out = []
    for k in range(K):
        n = int(n_arr[k])
        if spec.variant == "model1":
            p = softmax(np.concatenate([[0.0], vec]))
            x = rng.multinomial(n, p)
            table = x.reshape(J, I).T
        else:
            r = rng.multinomial(n, rows / rows.sum())
            P = conditional_probs(spec, vec, cov[k])
            table = np.stack([rng.multinomial(r[i], P[i]) for i in range(I)])
        out.append(StationData(f"S{k:05d}", table.sum(axis=1), table.sum(axis=0),
                               float(cov[k])))
    return out


# ---------------------------------------------------------------------------
# Synthetic probability families
# ---------------------------------------------------------------------------

def prob_family(kind: str, alpha: float, I: int):
    """
    I x I probability matrices with an asymmetry coefficient ``alpha``.

    ``type1`` weights the m-th circulant diagonal by alpha**m, with offsets
    m taken in [-I/2, I/2]; every row and column then holds each weight
    exactly once, so the margins are uniform whatever alpha.  ``type2``
    weights the m-th row by alpha**m (m = 0..I-1), which moves the row
    margins.  alpha = 1 gives the uniform matrix in both cases.
    """
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    i, j = np.indices((I, I))
    if kind == "type1":
        m = (j - i + I // 2) % I - I // 2
    elif kind == "type2":
        m = i
    else:
        raise ValueError(f"unknown family {kind!r}")
    W = np.power(float(alpha), m.astype(float))
    return W / W.sum()


# ---------------------------------------------------------------------------
# Posterior summaries
# ---------------------------------------------------------------------------

def weighted_quantiles(values, weights, qs):
    """Inverse-CDF quantiles of weighted samples along axis 0."""
    values = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if not total > 0:
        raise ValueError("all weights are zero")
    order = np.argsort(values, axis=0, kind="stable")
    sorted_vals = np.take_along_axis(values, order, axis=0)
    cw = np.cumsum(w[order], axis=0) / total
    out = []
    for q in qs:
        pos = np.argmax(cw >= q - 1e-12, axis=0)
        out.append(np.take_along_axis(sorted_vals, pos[None, ...], axis=0)[0])
    return np.stack(out, axis=-1)


def transition_summary(spec: ModelSpec, draws, weights=None, covariate=None,
                       qs=(0.05, 0.5, 0.95)):
    """
    Weighted posterior quantiles of each p_{j|i}.

    Returns an array of shape (I, J, len(qs)).
    """
    draws = [d.flat() if isinstance(d, Theta) else np.asarray(d, float) for d in draws]
    if not draws:
        raise ValueError("no draws")
    w = np.ones(len(draws)) if weights is None else np.asarray(weights, dtype=float)
    P = np.stack([conditional_probs(spec, d, covariate) for d in draws])
    return weighted_quantiles(P, w, qs)
