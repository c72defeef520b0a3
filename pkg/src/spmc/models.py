"""
Exponential-family laws for the latent count vector X.

Two families are provided, both with closed-form characteristic and cumulant
functions:

- ``MultinomialModel``: X ~ M(n, p), the ecological-inference workhorse.
- ``BernoulliVectorModel``: independent Bernoulli components, used for
  counting 0/1 tables with fixed margins.

Every quantity is computed along the last axis so the same arithmetic serves
a single model and a stack of K models (``stack``), which is what the batched
estimator uses.  Models are immutable; ``sample`` takes an explicit generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, gammaln, log_expit, logsumexp, softmax

PROB_SUM_TOL = 1e-12


@dataclass(frozen=True)
class Moments:
    mean: np.ndarray
    cov: np.ndarray


# ---------------------------------------------------------------------------
# Multinomial arithmetic (last axis = categories; leading axes broadcast)
# ---------------------------------------------------------------------------

def _mult_cumulant(logp, n, rho):
    return n * logsumexp(logp + rho, axis=-1)


def _mult_tilted_probs(logp, rho):
    return softmax(logp + rho, axis=-1)


def _mult_grad(logp, n, rho):
    return np.asarray(n, dtype=float)[..., None] * _mult_tilted_probs(logp, rho)


def _mult_hess(logp, n, rho):
    q = _mult_tilted_probs(logp, rho)
    n = np.asarray(n, dtype=float)[..., None, None]
    diag = q[..., :, None] * np.eye(q.shape[-1])
    return n * (diag - q[..., :, None] * q[..., None, :])


def _mult_log_cf(logp, n, w):
    """n * Log(sum_j p_j exp(i w_j)), principal branch.

    Only exp() of this value is ever used, and exp(n Log s) = s**n for
    integer n whatever branch Log takes, so no path continuity is needed.
    The sum is formed from real cosines and sines, which is much cheaper
    than a complex exponential.
    """
    p = np.exp(logp)
    re = np.sum(p * np.cos(w), axis=-1)
    im = np.sum(p * np.sin(w), axis=-1)
    n = np.asarray(n, dtype=float)
    with np.errstate(divide="ignore"):
        log_mod = 0.5 * np.log(re * re + im * im)
    return n * log_mod + 1j * (n * np.arctan2(im, re))


# ---------------------------------------------------------------------------
# Independent-Bernoulli arithmetic
# ---------------------------------------------------------------------------

def _bern_cumulant(logit_q, rho):
    # log(1 - q + q e^rho) = log(1 + e^(logit q + rho)) - log(1 + e^(logit q))
    return np.sum(np.logaddexp(0.0, logit_q + rho) - np.logaddexp(0.0, logit_q), axis=-1)


def _bern_grad(logit_q, rho):
    return expit(logit_q + rho)


def _bern_hess(logit_q, rho):
    g = expit(logit_q + rho)
    v = g * (1.0 - g)
    return v[..., :, None] * np.eye(v.shape[-1])


def _bern_log_cf(logit_q, w):
    q = expit(logit_q)
    terms = (1.0 - q) + q * np.exp(1j * w)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sum(np.log(terms), axis=-1)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MultinomialModel:
    """
    X ~ M(n, p) over ``d`` categories.

    Parameters
    ----------
    n : int
        Number of trials, at least 1.
    p : array_like
        Strictly positive probabilities summing to one.  Categories that can
        only be empty must be removed beforehand (see
        ``aggregation.reduce_zero_margins``).
    """

    n: int
    p: np.ndarray
    logp: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("p must be a non-empty vector")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n}")
        if not np.all(np.isfinite(p)) or np.any(p <= 0):
            raise ValueError("all category probabilities must be > 0")
        if abs(p.sum() - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"p must sum to 1 (got {p.sum()!r})")
        p.setflags(write=False)
        logp = np.log(p)
        logp.setflags(write=False)
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "logp", logp)

    @classmethod
    def from_unnormalized(cls, n, weights):
        w = np.asarray(weights, dtype=float)
        return cls(n, w / w.sum())

    @property
    def d(self):
        return self.p.size

    def char_fn(self, z):
        """E[exp(i z'X)]; ``z`` may carry leading batch axes."""
        return np.exp(self.log_char_fn(z))

    def log_char_fn(self, z):
        return _mult_log_cf(self.logp, self.n, np.asarray(z, dtype=float))

    def cumulant(self, rho):
        return _mult_cumulant(self.logp, self.n, np.asarray(rho, dtype=float))

    def cumulant_grad(self, rho):
        return _mult_grad(self.logp, self.n, np.asarray(rho, dtype=float))

    def cumulant_hess(self, rho):
        return _mult_hess(self.logp, self.n, np.asarray(rho, dtype=float))

    def tilt(self, rho):
        rho = np.asarray(rho, dtype=float)
        if not np.any(rho):
            return self
        q = _mult_tilted_probs(self.logp, rho)
        return MultinomialModel(self.n, q / q.sum())

    def moments(self):
        rho = np.zeros(self.d)
        return Moments(self.cumulant_grad(rho), self.cumulant_hess(rho))

    def logpmf(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.d:
            raise ValueError("x has the wrong dimension")
        xf = x.astype(float)
        ok = np.all(x >= 0, axis=-1) & (x.sum(axis=-1) == self.n)
        with np.errstate(invalid="ignore"):
            val = gammaln(self.n + 1.0) + np.sum(xf * self.logp - gammaln(xf + 1.0), axis=-1)
        return np.where(ok, val, -np.inf)

    def pmf(self, x):
        return np.exp(self.logpmf(x))

    def sample(self, rng, size=None):
        return rng.multinomial(self.n, self.p, size=size)

    @staticmethod
    def stack(models: Sequence["MultinomialModel"]) -> "ModelStack":
        logp = np.stack([m.logp for m in models])
        n = np.array([m.n for m in models], dtype=float)
        return MultinomialStack(logp, n)


@dataclass(frozen=True, eq=False)
class BernoulliVectorModel:
    """Independent components X_j ~ Bernoulli(q_j) with 0 < q_j < 1."""

    q: np.ndarray
    logit_q: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        if q.ndim != 1 or q.size == 0:
            raise ValueError("q must be a non-empty vector")
        if not np.all((q > 0) & (q < 1)):
            raise ValueError("every q_j must lie strictly inside (0, 1)")
        q.setflags(write=False)
        lq = np.log(q) - np.log1p(-q)
        lq.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "logit_q", lq)

    @property
    def d(self):
        return self.q.size

    def char_fn(self, z):
        return np.exp(self.log_char_fn(z))

    def log_char_fn(self, z):
        return _bern_log_cf(self.logit_q, np.asarray(z, dtype=float))

    def cumulant(self, rho):
        return _bern_cumulant(self.logit_q, np.asarray(rho, dtype=float))

    def cumulant_grad(self, rho):
        return _bern_grad(self.logit_q, np.asarray(rho, dtype=float))

    def cumulant_hess(self, rho):
        return _bern_hess(self.logit_q, np.asarray(rho, dtype=float))

    def tilt(self, rho):
        rho = np.asarray(rho, dtype=float)
        if not np.any(rho):
            return self
        return BernoulliVectorModel(expit(self.logit_q + rho))

    def moments(self):
        rho = np.zeros(self.d)
        return Moments(self.cumulant_grad(rho), self.cumulant_hess(rho))

    def logpmf(self, x):
        x = np.asarray(x)
        ok = np.all((x == 0) | (x == 1), axis=-1)
        lq1 = log_expit(self.logit_q)
        lq0 = log_expit(-self.logit_q)
        val = np.sum(np.where(x == 1, lq1, lq0), axis=-1)
        return np.where(ok, val, -np.inf)

    def pmf(self, x):
        return np.exp(self.logpmf(x))

    def sample(self, rng, size=None):
        shape = (self.d,) if size is None else tuple(np.atleast_1d(size)) + (self.d,)
        return (rng.random(shape) < self.q).astype(np.int64)

    @staticmethod
    def stack(models: Sequence["BernoulliVectorModel"]) -> "ModelStack":
        return BernoulliStack(np.stack([m.logit_q for m in models]))


# ---------------------------------------------------------------------------
# Stacks: K models of one family, shaped (K, d), for the batched estimator
# ---------------------------------------------------------------------------

class ModelStack:
    """Common surface of a stack of K same-family models."""

    K: int
    d: int

    def cumulant(self, rho):  # (K, d) -> (K,)
        raise NotImplementedError

    def grad(self, rho):  # (K, d) -> (K, d)
        raise NotImplementedError

    def hess(self, rho):  # (K, d) -> (K, d, d)
        raise NotImplementedError

    def tilt(self, rho):
        raise NotImplementedError

    def log_cf(self, w):  # (K, N, d) -> (K, N) complex
        raise NotImplementedError

    def margin_cov(self, A, rho):  # (K, d) -> (K, d_Y, d_Y)
        """A Var(X_rho) A^T without forming the d x d covariance."""
        raise NotImplementedError

    def take(self, idx):
        raise NotImplementedError


class MultinomialStack(ModelStack):
    def __init__(self, logp, n):
        self.logp = np.asarray(logp, dtype=float)
        self.n = np.asarray(n, dtype=float)
        self.K, self.d = self.logp.shape

    def cumulant(self, rho):
        return _mult_cumulant(self.logp, self.n, rho)

    def grad(self, rho):
        return _mult_grad(self.logp, self.n, rho)

    def hess(self, rho):
        return _mult_hess(self.logp, self.n, rho)

    def tilt(self, rho):
        logq = self.logp + rho
        return MultinomialStack(logq - logsumexp(logq, axis=-1, keepdims=True), self.n)

    def log_cf(self, w):
        return _mult_log_cf(self.logp[:, None, :], self.n[:, None], w)

    def margin_cov(self, A, rho):
        q = _mult_tilted_probs(self.logp, rho)
        Aq = A.apply(q)
        return self.n[:, None, None] * (A.gram(q) - Aq[:, :, None] * Aq[:, None, :])

    def take(self, idx):
        return MultinomialStack(self.logp[idx], self.n[idx])


class BernoulliStack(ModelStack):
    def __init__(self, logit_q):
        self.logit_q = np.asarray(logit_q, dtype=float)
        self.K, self.d = self.logit_q.shape

    def cumulant(self, rho):
        return _bern_cumulant(self.logit_q, rho)

    def grad(self, rho):
        return _bern_grad(self.logit_q, rho)

    def hess(self, rho):
        return _bern_hess(self.logit_q, rho)

    def tilt(self, rho):
        return BernoulliStack(self.logit_q + rho)

    def log_cf(self, w):
        return _bern_log_cf(self.logit_q[:, None, :], w)

    def margin_cov(self, A, rho):
        g = expit(self.logit_q + rho)
        return A.gram(g * (1.0 - g))

    def take(self, idx):
        return BernoulliStack(self.logit_q[idx])
