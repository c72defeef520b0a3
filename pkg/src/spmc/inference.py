"""
Posterior computation from unbiased likelihood estimates.

The workflow has two stages.  A Gaussian approximation N(mode, H^{-1}) is
built from an Adam search for the posterior mode (minibatches first, then
the full data) and a finite-difference Hessian.  It then serves as the
proposal of random-weight importance sampling or as the random-walk shape of
a pseudo-marginal Metropolis-Hastings chain, both of which target the exact
posterior because the likelihood estimates are unbiased.

Everything is written against ``Target``: a log prior plus a batched,
seedable log-likelihood estimate.  ``EITarget`` plugs in the saddlepoint
Monte Carlo estimator (or the moment-matched Gaussian likelihood); tests
plug in exact likelihoods computed by enumeration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import rqmc
from .aggregation import MarginsMap
from .ei_models import ModelSpec, as_arrays, gaussian_log_likelihood, station_stack
from .estimator import EstimatorConfig, batch_estimates

LOG_2PI = math.log(2.0 * math.pi)
FD_REL_STEP = 1e-5
HESS_REL_STEP = 1e-3


class InvalidEstimate(RuntimeError):
    """A likelihood estimate was not strictly positive where one was needed."""

    def __init__(self, message, n_invalid=0):
        super().__init__(message)
        self.n_invalid = n_invalid


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

class Target:
    """
    Un-normalized log posterior with a seedable likelihood estimate.

    Subclasses implement ``log_lik_batch``.  Evaluations with the same seed
    and ``fresh=False`` reuse the same random numbers for a given
    observation (common random numbers), which makes the estimate a
    deterministic, smooth function of the parameters.
    """

    n_params: int
    K: int
    prior_sigma2: float = 2.0

    def log_prior(self, vec):
        v = np.asarray(vec, dtype=float)
        s2 = self.prior_sigma2
        return -0.5 * np.sum(v * v, axis=-1) / s2 - 0.5 * v.shape[-1] * math.log(2 * math.pi * s2)

    def grad_log_prior(self, vec):
        return -np.asarray(vec, dtype=float) / self.prior_sigma2

    def log_lik_batch(self, vecs, seed, n_is=None, idx=None, fresh=False):
        """Estimated log-likelihoods of M parameter vectors.

        Returns
        -------
        ll : ndarray (M,)
            -inf where some estimate was not positive.
        n_invalid : ndarray of int (M,)
        """
        raise NotImplementedError

    def log_post_batch(self, vecs, seed, n_is=None, idx=None, scale=1.0, fresh=False):
        vecs = np.atleast_2d(np.asarray(vecs, dtype=float))
        ll, bad = self.log_lik_batch(vecs, seed, n_is=n_is, idx=idx, fresh=fresh)
        return self.log_prior(vecs) + scale * ll, bad

    def log_post(self, vec, seed, n_is=None):
        lp, bad = self.log_post_batch(np.asarray(vec)[None, :], seed, n_is=n_is)
        return float(lp[0]), int(bad[0])

    def grad(self, vec, seed, n_is=None, idx=None, scale=1.0):
        """Central finite differences of the CRN log posterior."""
        vec = np.asarray(vec, dtype=float)
        P = vec.size
        h = FD_REL_STEP * np.maximum(1.0, np.abs(vec))
        pts = np.concatenate([vec + np.diag(h), vec - np.diag(h)])
        ll, bad = self.log_lik_batch(pts, seed, n_is=n_is, idx=idx)
        if np.any(bad):
            raise InvalidEstimate("non-positive likelihood estimate near the evaluation point",
                                  int(bad.sum()))
        g_ll = (ll[:P] - ll[P:]) / (2.0 * h)
        return self.grad_log_prior(vec) + scale * g_ll


class EITarget(Target):
    """
    Posterior of an ecological-inference model.

    Parameters
    ----------
    spec : ModelSpec
    data : list of StationData or StationArrays
    cfg : EstimatorConfig
        Estimator settings; ``n_is`` is the default number of draws and may
        be overridden per call.
    likelihood : {"saddlepoint", "gaussian"}
        "gaussian" swaps in the closed-form moment-matched normal likelihood
        (deterministic; seeds are ignored).
    """

    def __init__(self, spec: ModelSpec, data, cfg: EstimatorConfig | None = None,
                 A: MarginsMap | None = None, likelihood: str = "saddlepoint"):
        self.spec = spec
        self.arrays = as_arrays(data, spec)
        self.cfg = EstimatorConfig() if cfg is None else cfg
        self.A = spec.A if A is None else A
        if likelihood not in ("saddlepoint", "gaussian"):
            raise ValueError(f"unknown likelihood {likelihood!r}")
        self.likelihood = likelihood
        self.n_params = spec.n_params
        self.K = self.arrays.K
        self.prior_sigma2 = spec.prior_sigma2

    def log_lik_batch(self, vecs, seed, n_is=None, idx=None, fresh=False):
        vecs = np.atleast_2d(np.asarray(vecs, dtype=float))
        M = vecs.shape[0]
        ids = np.arange(self.K) if idx is None else np.asarray(idx)
        if ids.size == 0:
            return np.zeros(M), np.zeros(M, dtype=np.int64)
        if self.likelihood == "gaussian":
            ll = np.array([gaussian_log_likelihood(self.spec, v, self.arrays, ids) for v in vecs])
            return ll, (~np.isfinite(ll)).astype(np.int64)
        cfg = self.cfg.replace(seed=int(seed), n_is=n_is or self.cfg.n_is)
        stacks = [station_stack(self.spec, v, self.arrays).take(ids) for v in vecs]
        logp = np.concatenate([s.logp for s in stacks])
        n = np.concatenate([s.n for s in stacks])
        stack = type(stacks[0])(logp, n)
        Y = np.tile(self.arrays.Y[ids], (M, 1))
        if fresh:
            streams = (np.arange(M)[:, None] * self.K + ids[None, :]).ravel()
        else:
            streams = np.tile(ids, M)
        res = batch_estimates(stack, self.A, Y, cfg, stream_ids=streams)
        sign = res.sign.reshape(M, ids.size)
        logs = res.log_abs.reshape(M, ids.size)
        bad = np.sum(sign <= 0, axis=1)
        ll = np.array([math.fsum(row) for row in logs.tolist()])
        ll[bad > 0] = -np.inf
        return ll, bad


# ---------------------------------------------------------------------------
# Stage 1: mode and curvature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamSchedule:
    phase1_iters: int = 2000
    phase1_batch: int | None = None
    phase1_lr: float = 1e-1
    phase2_iters: int = 5000
    phase2_lr: float = 1e-2
    phase2_nis_early: int = 16
    phase2_nis_late: int = 128
    phase2_late_start: int = 4500
    tail_average: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("phase1_lr", "phase2_lr", "phase2_nis_early", "phase2_nis_late",
                     "tail_average"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.phase1_iters < 0 or self.phase2_iters < 1:
            raise ValueError("iteration counts must be non-negative (phase 2 at least 1)")
        if self.tail_average > self.phase2_iters:
            raise ValueError("tail_average cannot exceed phase2_iters")

    def batch_size(self, K):
        b = self.phase1_batch if self.phase1_batch is not None else min(2000, K // 2)
        return max(1, min(int(b), K))

    @classmethod
    def scaled(cls, factor: float, **kw):
        """The default schedule with every iteration count multiplied by ``factor``."""
        base = cls()
        p2 = max(1, int(round(base.phase2_iters * factor)))
        fields = dict(
            phase1_iters=int(round(base.phase1_iters * factor)),
            phase2_iters=p2,
            phase2_late_start=int(round(base.phase2_late_start * factor)),
            tail_average=min(base.tail_average, p2),
        )
        fields.update(kw)
        return cls(**fields)


@dataclass
class MapResult:
    mode: np.ndarray
    n_invalid: int
    iterations: int
    trace: np.ndarray = field(repr=False, default=None)


class _Adam:
    def __init__(self, x0, schedule: AdamSchedule):
        self.x = np.array(x0, dtype=float)
        self.m = np.zeros_like(self.x)
        self.v = np.zeros_like(self.x)
        self.t = 0
        self.s = schedule

    def ascend(self, g, lr):
        s = self.s
        self.t += 1
        self.m = s.beta1 * self.m + (1 - s.beta1) * g
        self.v = s.beta2 * self.v + (1 - s.beta2) * g * g
        m_hat = self.m / (1 - s.beta1 ** self.t)
        v_hat = self.v / (1 - s.beta2 ** self.t)
        self.x = self.x + lr * m_hat / (np.sqrt(v_hat) + s.eps)


def adam_map(target: Target, schedule: AdamSchedule | None = None, seed: int = 0,
             x0=None, keep_trace=False) -> MapResult:
    """
    Approximate posterior mode by two Adam phases from ``x0`` (default 0).

    Phase 1 ascends minibatch estimates prior + (K / batch) * loglik(batch),
    with a fresh batch and fresh random numbers at every iteration.  Phase 2
    uses the full data, ``phase2_nis_early`` draws and then
    ``phase2_nis_late`` from ``phase2_late_start`` on, and the result is the
    average of the last ``tail_average`` iterates.

    Iterations whose gradient cannot be formed (a non-positive estimate) are
    skipped; more than 1% of such iterations raises ``InvalidEstimate``.
    """
    s = AdamSchedule() if schedule is None else schedule
    opt = _Adam(np.zeros(target.n_params) if x0 is None else x0, s)
    K = target.K
    rng = rqmc.stream_rng(seed, 1)
    total = s.phase1_iters + s.phase2_iters
    invalid = 0
    trace = [] if keep_trace else None
    tail = []

    def step(it, lr, n_is, idx=None, scale=1.0):
        nonlocal invalid
        try:
            g = target.grad(opt.x, int(rqmc.stream_key(seed, 2, it)), n_is=n_is,
                            idx=idx, scale=scale)
        except InvalidEstimate:
            invalid += 1
            if invalid > max(1, 0.01 * total):
                raise InvalidEstimate(f"{invalid} of {it + 1} Adam iterations hit "
                                      "non-positive likelihood estimates", invalid)
            return
        opt.ascend(g, lr)

    if K > 0:
        b = s.batch_size(K)
        for it in range(s.phase1_iters):
            idx = np.sort(rng.choice(K, size=b, replace=False))
            step(it, s.phase1_lr, s.phase2_nis_early, idx, K / b)
            if keep_trace:
                trace.append(opt.x.copy())
    for j in range(s.phase2_iters):
        it = s.phase1_iters + j
        n_is = s.phase2_nis_late if j >= s.phase2_late_start else s.phase2_nis_early
        step(it, s.phase2_lr, n_is)
        if j >= s.phase2_iters - s.tail_average:
            tail.append(opt.x.copy())
        if keep_trace:
            trace.append(opt.x.copy())
    mode = np.mean(tail, axis=0)
    return MapResult(mode, invalid, total, None if trace is None else np.array(trace))


def hessian_at(target: Target, mode, seed: int = 0, n_is: int | None = 128):
    """
    Hessian of the negative log posterior at ``mode``.

    Central differences of the CRN finite-difference gradient, symmetrized,
    with eigenvalues floored at 1e-8 times the largest to make it positive
    definite.
    """
    mode = np.asarray(mode, dtype=float)
    P = mode.size
    h = HESS_REL_STEP * np.maximum(1.0, np.abs(mode))
    cols = []
    for i in range(P):
        e = np.zeros(P)
        e[i] = h[i]
        gp = target.grad(mode + e, seed, n_is=n_is)
        gm = target.grad(mode - e, seed, n_is=n_is)
        cols.append(-(gp - gm) / (2.0 * h[i]))
    H = np.array(cols).T
    H = 0.5 * (H + H.T)
    if not np.any(H):
        raise ValueError("Hessian is identically zero")
    return repair_pd(H)


def repair_pd(H, rel_floor=1e-8):
    w, V = np.linalg.eigh(H)
    top = np.max(np.abs(w))
    if top == 0:
        raise ValueError("Hessian is identically zero")
    w = np.maximum(w, rel_floor * top)
    H = (V * w) @ V.T
    return 0.5 * (H + H.T)


@dataclass(frozen=True)
class LaplaceApprox:
    """N(mode, hessian^{-1}); ``chol`` is the lower Cholesky factor of hessian."""

    mode: np.ndarray
    hessian: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        H = np.asarray(self.hessian, dtype=float)
        object.__setattr__(self, "hessian", H)
        object.__setattr__(self, "mode", np.asarray(self.mode, dtype=float))
        object.__setattr__(self, "chol", np.linalg.cholesky(H))

    @property
    def dim(self):
        return self.mode.size

    @property
    def cov(self):
        Linv = np.linalg.inv(self.chol)
        return Linv.T @ Linv

    @property
    def sd(self):
        return np.sqrt(np.diag(self.cov))

    def sample(self, z):
        """Map standard normal rows ``z`` (M, d) to draws from the approximation."""
        return self.mode + np.linalg.solve(self.chol.T, np.atleast_2d(z).T).T

    def logpdf(self, x):
        r = (np.atleast_2d(x) - self.mode) @ self.chol
        return (-0.5 * self.dim * LOG_2PI + np.sum(np.log(np.diag(self.chol)))
                - 0.5 * np.sum(r * r, axis=1))


def laplace(target: Target, schedule: AdamSchedule | None = None, seed: int = 0,
            hessian_nis: int | None = None, x0=None) -> tuple[LaplaceApprox, MapResult]:
    """Adam mode search from ``x0`` (default 0), then the Hessian at the mode."""
    s = AdamSchedule() if schedule is None else schedule
    res = adam_map(target, s, seed, x0=x0)
    H = hessian_at(target, res.mode, int(rqmc.stream_key(seed, 3)),
                   n_is=hessian_nis or s.phase2_nis_late)
    return LaplaceApprox(res.mode, H), res


# ---------------------------------------------------------------------------
# Stage 2: exact samplers
# ---------------------------------------------------------------------------

@dataclass
class PosteriorDraws:
    """
    Weighted draws (``kind="weighted_is"``) or a Markov chain
    (``kind="mcmc_chain"``).  For a chain, ``log_weights`` is all zeros and
    ``accepted`` records the accept decision of each step.
    """

    kind: str
    draws: np.ndarray
    log_weights: np.ndarray
    ess: float
    log_marginal_likelihood: float | None = None
    log_marginal_se: float | None = None
    accepted: np.ndarray | None = None
    n_invalid: int = 0

    @property
    def N(self):
        return self.draws.shape[0]

    def normalized_weights(self):
        lw = self.log_weights
        return np.exp(lw - logsumexp(lw))

    def mean(self):
        return self.normalized_weights() @ self.draws

    def cov(self):
        w = self.normalized_weights()
        c = self.draws - w @ self.draws
        return (c * w[:, None]).T @ c

    def sd(self):
        return np.sqrt(np.diag(self.cov()))

    @property
    def acceptance_rate(self):
        return None if self.accepted is None else float(np.mean(self.accepted))


def ess(log_weights) -> float:
    """(sum w)^2 / sum w^2 in log space; -inf weights count as zero."""
    lw = np.asarray(log_weights, dtype=float)
    lw = lw[np.isfinite(lw)]
    if lw.size == 0:
        raise ValueError("no finite log-weights")
    return float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)))


def jackknife_logz_se(log_weights) -> float:
    """Leave-one-out jackknife standard error of log mean(w)."""
    lw = np.asarray(log_weights, dtype=float)
    N = lw.size
    if N < 2:
        return math.nan
    L = logsumexp(lw)
    with np.errstate(divide="ignore"):
        loo = L + np.log1p(-np.minimum(np.exp(lw - L), 1.0)) - math.log(N - 1)
    if not np.all(np.isfinite(loo)):
        return math.inf
    return float(math.sqrt((N - 1) / N * np.sum((loo - loo.mean()) ** 2)))


def log10_bayes_factor(logZ_a, logZ_b) -> float:
    if not (math.isfinite(logZ_a) and math.isfinite(logZ_b)):
        raise ValueError("log evidences must be finite")
    return (logZ_a - logZ_b) / math.log(10.0)


def random_weight_is(target: Target, approx: LaplaceApprox, N: int, seed: int = 0,
                     n_is: int | None = None, chunk: int = 64) -> PosteriorDraws:
    """
    Importance sampling from N(mode, H^{-1}) with estimated weights.

    The log-weight of draw n is the estimated log posterior at theta_n (fresh
    random numbers per draw) minus the proposal log-density.  Because the
    likelihood estimate is unbiased, logsumexp(log_weights) - log N estimates
    the log marginal likelihood.  Draws with a non-positive estimate get
    weight zero and are counted.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    z = rqmc.stream_rng(seed, 4).standard_normal((N, approx.dim))
    thetas = approx.sample(z)
    logq = approx.logpdf(thetas)
    lp = np.empty(N)
    bad = np.zeros(N, dtype=np.int64)
    for start in range(0, N, chunk):
        sl = slice(start, min(N, start + chunk))
        # each chunk gets its own seed so draws never share streams
        lp[sl], b = target.log_post_batch(thetas[sl], int(rqmc.stream_key(seed, 5, start)),
                                          n_is=n_is, fresh=True)
        bad[sl] = b > 0
    lw = lp - logq
    lw[bad > 0] = -np.inf
    if not np.any(np.isfinite(lw)):
        raise InvalidEstimate("every importance weight is zero", int(bad.sum()))
    logZ = float(logsumexp(lw) - math.log(N))
    return PosteriorDraws("weighted_is", thetas, lw, ess(lw), logZ,
                          jackknife_logz_se(lw), n_invalid=int(bad.sum()))


def pmmh(target: Target, init, approx: LaplaceApprox, steps: int,
         step_scale: float | None = None, seed: int = 0,
         n_is: int | None = None) -> PosteriorDraws:
    """
    Pseudo-marginal random-walk Metropolis-Hastings.

    Proposals are N(theta, step_scale^2 H^{-1}) with default scale
    2.38 / sqrt(d).  The estimated log posterior of the current state is
    kept until a move is accepted; it is never recomputed.  Proposals whose
    estimate is not positive are rejected and counted.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    d = approx.dim
    scale = 2.38 / math.sqrt(d) if step_scale is None else float(step_scale)
    rng = rqmc.stream_rng(seed, 6)
    x = np.asarray(init, dtype=float).copy()
    lp, bad = target.log_post(x, int(rqmc.stream_key(seed, 7, 0)), n_is=n_is)
    if bad:
        raise InvalidEstimate("non-positive likelihood estimate at the initial state", bad)
    chain = np.empty((steps, d))
    accepted = np.zeros(steps, dtype=bool)
    invalid = 0
    for t in range(steps):
        z = rng.standard_normal(d)
        u = rng.random()
        prop = x + scale * np.linalg.solve(approx.chol.T, z)
        if scale == 0.0:
            chain[t] = x
            continue
        lp_new, b = target.log_post(prop, int(rqmc.stream_key(seed, 7, t + 1)), n_is=n_is)
        if b:
            invalid += 1
        elif math.log(u) < lp_new - lp:
            x, lp = prop, lp_new
            accepted[t] = True
        chain[t] = x
    return PosteriorDraws("mcmc_chain", chain, np.zeros(steps), chain_ess(chain),
                          accepted=accepted, n_invalid=invalid)


def autocorr_ess(x) -> float:
    """Effective sample size of a scalar chain (Geyer's initial positive sequence)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    c = x - x.mean()
    var = c @ c / n
    if var == 0:
        return float(n)
    f = np.fft.rfft(c, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1e-12))


def chain_ess(chain) -> float:
    """Smallest per-coordinate effective sample size of a chain (steps, d)."""
    chain = np.asarray(chain, dtype=float)
    if chain.ndim == 1:
        chain = chain[:, None]
    return float(min(autocorr_ess(chain[:, j]) for j in range(chain.shape[1])))


# ---------------------------------------------------------------------------
# Convenience wrappers
# ---------------------------------------------------------------------------

def grad_log_posterior(spec: ModelSpec, params, data, A: MarginsMap | None = None,
                       cfg: EstimatorConfig | None = None, crn_seed: int = 0):
    target = EITarget(spec, data, cfg, A)
    vec = params.flat() if hasattr(params, "flat") else np.asarray(params, dtype=float)
    return target.grad(vec, crn_seed)


__all__ = [
    "Target", "EITarget", "InvalidEstimate", "AdamSchedule", "MapResult",
    "LaplaceApprox", "PosteriorDraws", "adam_map", "hessian_at", "repair_pd",
    "laplace", "random_weight_is", "pmmh", "ess", "chain_ess", "autocorr_ess",
    "jackknife_logz_se", "log10_bayes_factor", "grad_log_posterior",
]
