"""
Saddlepoint Monte Carlo estimators of f_{AX}(y) = P(AX = y).

The inversion formula writes the probability as an integral over the box
[-pi, pi]^{d_Y}; each estimator averages the real part of the integrand
under a proposal (uniform on the box, or Gaussian with precision Sigma_Y),
optionally after exponentially tilting X so that y becomes its mean.

All heavy lifting is vectorized over a stack of K observations that share
the same aggregation map, so a whole likelihood is one pass of array code.
The results for an observation do not depend on the other members of its
batch: randomness is keyed on (seed, observation index) and every reduction
is row-wise.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rqmc
from .aggregation import (InfeasibleObservation, MarginsMap, reduce_bernoulli,
                          reduce_multinomial)
from .models import (BernoulliStack, BernoulliVectorModel, ModelStack,
                     MultinomialModel, MultinomialStack)

LOG_2PI = math.log(2.0 * math.pi)

NEWTON_MAX_ITER = 50
NEWTON_MAX_HALVINGS = 30
NEWTON_RTOL = 1e-8

# Work arrays are chunked over observations to stay below this many
# complex entries (K_chunk * N * d_X).
_CHUNK_ENTRIES = 4_000_000

VARIANTS = {
    "uniform": ("uniform", False),
    "uniform-tilt": ("uniform", True),
    "gaussian": ("gaussian", False),
    "gaussian-tilt": ("gaussian", True),
}


@dataclass(frozen=True)
class EstimatorConfig:
    """
    Parameters
    ----------
    proposal : {"uniform", "gaussian"}
    tilt : bool
        Tilt X at the saddlepoint before importance sampling.
    n_is : int
        Number of importance draws; rounded up to a power of two with RQMC.
    use_rqmc : bool
        Drive the proposal with a digitally shifted Sobol net.
    seed : int
    scramble : bool
        Use scrambled rather than shifted Sobol points (RQMC only).
    """

    proposal: str = "gaussian"
    tilt: bool = True
    n_is: int = 128
    use_rqmc: bool = False
    seed: int = 0
    scramble: bool = False

    def __post_init__(self):
        if self.proposal not in ("uniform", "gaussian"):
            raise ValueError(f"unknown proposal {self.proposal!r}")
        if int(self.n_is) != self.n_is or self.n_is < 1:
            raise ValueError("n_is must be a positive integer")

    @classmethod
    def variant(cls, name, **kw):
        proposal, tilt = VARIANTS[name]
        return cls(proposal=proposal, tilt=tilt, **kw)

    @property
    def name(self):
        return self.proposal + ("-tilt" if self.tilt else "")

    @property
    def effective_n_is(self):
        if self.use_rqmc:
            return 2 ** rqmc.next_pow2_exponent(self.n_is)
        return int(self.n_is)

    def replace(self, **kw):
        fields = dict(proposal=self.proposal, tilt=self.tilt, n_is=self.n_is,
                      use_rqmc=self.use_rqmc, seed=self.seed, scramble=self.scramble)
        fields.update(kw)
        return EstimatorConfig(**fields)


@dataclass(frozen=True)
class SaddlepointSolution:
    nu: np.ndarray
    converged: bool
    iterations: int
    residual_inf_norm: float


@dataclass(frozen=True)
class DensityEstimate:
    """Signed estimate ``sign * exp(log_abs)`` of P(AX = y) and diagnostics."""

    sign: int
    log_abs: float
    nu: np.ndarray
    newton_iters: int
    weight_cv: float
    converged: bool = True
    n_is: int = 0
    exact: bool = False

    @property
    def value(self):
        return 0.0 if self.sign == 0 else self.sign * math.exp(self.log_abs)


@dataclass
class BatchResult:
    """Per-observation arrays of a batched evaluation."""

    sign: np.ndarray
    log_abs: np.ndarray
    newton_iters: np.ndarray
    converged: np.ndarray
    weight_cv: np.ndarray

    @property
    def K(self):
        return self.sign.shape[0]


@dataclass(frozen=True)
class LikelihoodDiagnostics:
    n_obs: int
    n_invalid: int
    n_negative: int
    n_infeasible: int
    n_newton_failed: int
    max_newton_iters: int

    @property
    def valid(self):
        return self.n_invalid == 0


# ---------------------------------------------------------------------------
# Linear algebra helpers (row-wise, batch-independent arithmetic)
# ---------------------------------------------------------------------------

def _chol_jitter(S):
    """Lower Cholesky factor with escalating diagonal jitter, or None."""
    d = S.shape[0]
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    scale = max(np.trace(S) / max(d, 1), np.finfo(float).tiny)
    jitter = 1e-12 * scale
    while jitter <= 1e-6 * scale * (1 + 1e-9):
        try:
            return np.linalg.cholesky(S + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    return None


def _batched_chol(S):
    """Cholesky of each (d, d) slice; failed slices get NaN factors."""
    try:
        return np.linalg.cholesky(S), np.ones(S.shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        L = np.full_like(S, np.nan)
        ok = np.zeros(S.shape[0], dtype=bool)
        for k in range(S.shape[0]):
            Lk = _chol_jitter(S[k])
            if Lk is not None:
                L[k], ok[k] = Lk, True
        return L, ok


def _chol_solve(L, b):
    """Solve (L L^T) x = b using the factor only (batched)."""
    return np.linalg.solve(L @ np.swapaxes(L, -1, -2), b[..., None])[..., 0]


# ---------------------------------------------------------------------------
# Saddlepoint equation
# ---------------------------------------------------------------------------

def _residual(stack, A, Y, nu):
    return Y - A.apply(stack.grad(A.transpose_apply(nu)))


def _newton_batch(stack: ModelStack, A: MarginsMap, Y, polish=True):
    """Damped Newton on A grad kappa(A^T nu) = y for every row of Y.

    Returns (nu, converged, iterations, residual_inf_norm).  After
    convergence one extra undamped step is taken (if it does not increase
    the residual) so that nu is accurate to rounding error; this keeps the
    tilted estimate a smooth function of the model parameters, which the
    finite-difference gradients rely on.  The extra step is not counted.
    """
    K, dY = Y.shape
    tol = NEWTON_RTOL * np.maximum(1.0, np.max(np.abs(Y), axis=1, initial=0.0))
    nu = np.zeros((K, dY))
    res = _residual(stack, A, Y, nu)
    rn = np.max(np.abs(res), axis=1, initial=0.0)
    iters = np.zeros(K, dtype=np.int64)
    conv = rn <= tol
    failed = np.zeros(K, dtype=bool)

    def newton_step(idx):
        sub = stack.take(idx)
        H = sub.margin_cov(A, A.transpose_apply(nu[idx]))
        L, ok = _batched_chol(H)
        step = np.zeros((idx.size, dY))
        if ok.any():
            step[ok] = _chol_solve(L[ok], res[idx][ok])
        return step, ok, sub

    for _ in range(NEWTON_MAX_ITER):
        act = np.flatnonzero(~conv & ~failed)
        if act.size == 0:
            break
        step, ok, sub = newton_step(act)
        failed[act[~ok]] = True
        act, step = act[ok], step[ok]
        sub = sub.take(ok)
        t = np.ones(act.size)
        pending = np.ones(act.size, dtype=bool)
        Ysub = Y[act]
        for _h in range(NEWTON_MAX_HALVINGS + 1):
            p = np.flatnonzero(pending)
            if p.size == 0:
                break
            trial = nu[act[p]] + t[p, None] * step[p]
            r_new = _residual(sub.take(p), A, Ysub[p], trial)
            n_new = np.max(np.abs(r_new), axis=1, initial=0.0)
            good = np.isfinite(n_new) & (n_new < rn[act[p]])
            g = p[good]
            nu[act[g]] = trial[good]
            res[act[g]] = r_new[good]
            rn[act[g]] = n_new[good]
            pending[g] = False
            t[p[~good]] *= 0.5
        iters[act] += 1
        failed[act[pending]] = True
        conv = rn <= tol

    if polish:
        idx = np.flatnonzero(conv & (iters > 0))
        if idx.size:
            step, ok, sub = newton_step(idx)
            trial = nu[idx] + step
            r_new = _residual(sub, A, Y[idx], trial)
            n_new = np.max(np.abs(r_new), axis=1, initial=0.0)
            good = ok & np.isfinite(n_new) & (n_new <= rn[idx])
            nu[idx[good]] = trial[good]
            rn[idx[good]] = n_new[good]
    return nu, conv, iters, rn


def _stack_of(model):
    if isinstance(model, MultinomialModel):
        return MultinomialModel.stack([model])
    if isinstance(model, BernoulliVectorModel):
        return BernoulliVectorModel.stack([model])
    raise TypeError(f"unsupported model type {type(model).__name__}")


def solve_saddlepoint(model, A: MarginsMap, y) -> SaddlepointSolution:
    """
    Solve A grad kappa(A^T nu) = y by damped Newton from nu = 0.

    Convergence means a residual sup-norm at most 1e-8 * max(1, |y|_inf);
    failure (50 iterations, 30 halvings without progress, or a Hessian that
    stays singular under jitter) is reported through ``converged=False``.
    """
    Y = np.asarray(y, dtype=float)[None, :]
    nu, conv, iters, rn = _newton_batch(_stack_of(model), A, Y)
    return SaddlepointSolution(nu[0], bool(conv[0]), int(iters[0]), float(rn[0]))


# ---------------------------------------------------------------------------
# Importance sampling kernel
# ---------------------------------------------------------------------------

@dataclass
class _Prepared:
    """Everything about a stack that does not depend on the random draws."""

    working: ModelStack
    A: MarginsMap
    Y: np.ndarray
    nu: np.ndarray
    log_prefactor: np.ndarray
    iters: np.ndarray
    converged: np.ndarray
    prec_chol: np.ndarray | None = None
    half_logdet: np.ndarray | None = None


def _prepare(stack: ModelStack, A: MarginsMap, Y, cfg: EstimatorConfig, nu=None):
    K, dY = Y.shape
    iters = np.zeros(K, dtype=np.int64)
    converged = np.ones(K, dtype=bool)
    if nu is not None:
        nu = np.broadcast_to(np.asarray(nu, dtype=float), (K, dY)).copy()
    elif cfg.tilt and dY:
        nu, converged, iters, _ = _newton_batch(stack, A, Y)
        nu[~converged] = 0.0
    else:
        nu = np.zeros((K, dY))
    if np.any(nu):
        rho = A.transpose_apply(nu)
        working = stack.tilt(rho)
        log_pre = stack.cumulant(rho) - np.einsum("kr,kr->k", nu, Y, optimize=False)
    else:
        working = stack
        log_pre = np.zeros(K)
    prep = _Prepared(working, A, Y, nu, log_pre, iters, converged)
    if cfg.proposal == "gaussian" and dY:
        sigma = working.margin_cov(A, np.zeros((K, A.d_X)))
        L, ok = _batched_chol(sigma)
        if not ok.all():
            raise np.linalg.LinAlgError(
                "Gaussian proposal: A Var(X) A^T is singular for "
                f"{int((~ok).sum())} observation(s)")
        eye = np.broadcast_to(np.eye(dY), sigma.shape)
        Linv = np.linalg.solve(L, eye)
        prec = np.einsum("kji,kjl->kil", Linv, Linv, optimize=False)
        prep.prec_chol = np.linalg.cholesky(0.5 * (prec + np.swapaxes(prec, 1, 2)))
        prep.half_logdet = np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    return prep


def _draw(prep: _Prepared, keys, cfg: EstimatorConfig):
    """Signed log-estimates for each row of a prepared stack.

    ``keys`` has shape (K,) and selects each observation's random stream.
    """
    K, dY = prep.Y.shape
    N = cfg.effective_n_is
    if dY == 0:
        ones = np.ones(K)
        return ones, prep.log_prefactor.copy(), np.zeros(K)
    U = rqmc.uniform_draws(keys, N, dY, cfg.use_rqmc, cfg.scramble)
    if cfg.proposal == "uniform":
        Z = rqmc.to_uniform_box(U)
        log_w = np.zeros(U.shape[:2])
    else:
        V = rqmc.std_normal(U)
        Z = V @ np.swapaxes(prep.prec_chol, 1, 2)
        log_w = (0.5 * np.einsum("knj,knj->kn", V, V, optimize=False)
                 - 0.5 * dY * LOG_2PI - prep.half_logdet[:, None])
        outside = np.any(np.abs(Z) > np.pi, axis=2)
        log_w = np.where(outside, -np.inf, log_w)
    W = prep.A.transpose_apply(Z)
    log_cf = prep.working.log_cf(W)
    phase = log_cf.imag - np.einsum("knr,kr->kn", Z, prep.Y, optimize=False)
    log_mag = log_cf.real + log_w
    with np.errstate(invalid="ignore"):
        m = np.max(log_mag, axis=1)
        m = np.where(np.isfinite(m), m, 0.0)
        terms = np.exp(log_mag - m[:, None]) * np.cos(phase)
    terms = np.where(np.isfinite(terms), terms, 0.0)
    mean = terms.mean(axis=1)
    sign = np.sign(mean)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_abs = np.log(np.abs(mean)) + m + prep.log_prefactor
        cv = terms.std(axis=1) / np.abs(mean)
    log_abs = np.where(sign == 0, -np.inf, log_abs)
    return sign, log_abs, cv


def _chunks(K, N, dX):
    size = max(1, _CHUNK_ENTRIES // max(1, N * dX))
    return [slice(s, min(K, s + size)) for s in range(0, K, size)]


def _run_stack(stack, A, Y, keys, cfg, nu=None, prepared=None):
    """Prepare (unless given) and draw, chunked over observations."""
    K = Y.shape[0]
    out = BatchResult(np.zeros(K), np.full(K, -np.inf), np.zeros(K, dtype=np.int64),
                      np.ones(K, dtype=bool), np.zeros(K))
    prepared_chunks = []
    for sl in _chunks(K, cfg.effective_n_is, A.d_X):
        if prepared is None:
            prep = _prepare(stack.take(np.arange(K)[sl]), A, Y[sl], cfg,
                            None if nu is None else nu[sl])
        else:
            prep = prepared[len(prepared_chunks)]
        prepared_chunks.append(prep)
        s, la, cv = _draw(prep, keys[sl], cfg)
        out.sign[sl], out.log_abs[sl], out.weight_cv[sl] = s, la, cv
        out.newton_iters[sl], out.converged[sl] = prep.iters, prep.converged
    return out, prepared_chunks


# ---------------------------------------------------------------------------
# Observation stacks and reduction dispatch
# ---------------------------------------------------------------------------

def as_stack(models) -> ModelStack:
    if isinstance(models, ModelStack):
        return models
    models = list(models)
    if not models:
        raise ValueError("empty model list")
    kind = type(models[0])
    if any(type(m) is not kind for m in models):
        raise TypeError("all models in a batch must share one family")
    return kind.stack(models)


def _needs_reduction(stack, A: MarginsMap, Y):
    """Observations whose margins or cells force some coordinates."""
    indep, indep_total = A._redundancy_free
    K = Y.shape[0]
    if isinstance(stack, MultinomialStack):
        n = stack.n[:, None]
        flag = np.any((Y <= 0) | (Y >= n), axis=1) if A.d_Y else np.zeros(K, bool)
        for _cols, rids in A.implied:
            flag |= (stack.n - Y[:, list(rids)].sum(axis=1)) <= 0
        flag |= np.any(~np.isfinite(stack.logp), axis=1)
        if not indep_total:
            flag[:] = True
    elif isinstance(stack, BernoulliStack):
        sizes = np.array([len(r) for r in A.rows])
        flag = np.any((Y <= 0) | (Y >= sizes), axis=1)
        if not indep:
            flag[:] = True
    else:
        raise TypeError(f"unsupported stack {type(stack).__name__}")
    return flag


def _reduce_one(stack, k, A, y):
    if isinstance(stack, MultinomialStack):
        return reduce_multinomial(A, np.exp(stack.logp[k]), int(stack.n[k]), y)
    q = 1.0 / (1.0 + np.exp(-stack.logit_q[k]))
    return reduce_bernoulli(A, q, y)


def batch_estimates(models, A: MarginsMap, ys, cfg: EstimatorConfig,
                    stream_ids=None, nu=None) -> BatchResult:
    """
    Independent estimates of P(AX_k = y_k) for every observation k.

    Parameters
    ----------
    models : sequence of models or a ModelStack
    A : MarginsMap
    ys : array_like, shape (K, d_Y)
    cfg : EstimatorConfig
    stream_ids : array_like of int, optional
        Random stream of each observation (default: its position).  The
        stream key is derived from ``(cfg.seed, stream_id)``.
    nu : array_like, optional
        Fixed tilt (K, d_Y) used instead of the saddlepoint; disables the
        zero-margin reduction, so every y must be interior.
    """
    stack = as_stack(models)
    Y = np.asarray(ys, dtype=float).reshape(stack.K, A.d_Y)
    K = stack.K
    ids = np.arange(K) if stream_ids is None else np.asarray(stream_ids)
    keys = rqmc.stream_key(cfg.seed, ids)
    if nu is not None:
        out, _ = _run_stack(stack, A, Y, keys, cfg, nu=np.asarray(nu, float).reshape(K, A.d_Y))
        return out

    flag = _needs_reduction(stack, A, Y)
    regular = np.flatnonzero(~flag)
    out = BatchResult(np.zeros(K), np.full(K, -np.inf), np.zeros(K, dtype=np.int64),
                      np.ones(K, dtype=bool), np.zeros(K))
    if regular.size:
        res, _ = _run_stack(stack.take(regular), A, Y[regular], keys[regular], cfg)
        _assign(out, regular, res)
    for k in np.flatnonzero(flag):
        est = _estimate_reduced(_reduce_one, stack, k, A, Y[k], keys[k:k + 1], cfg)
        _assign(out, np.array([k]), est)
    return out


def _assign(out: BatchResult, idx, res: BatchResult):
    out.sign[idx] = res.sign
    out.log_abs[idx] = res.log_abs
    out.newton_iters[idx] = res.newton_iters
    out.converged[idx] = res.converged
    out.weight_cv[idx] = res.weight_cv


def _estimate_reduced(reducer, stack, k, A, y, key, cfg) -> BatchResult:
    try:
        red = reducer(stack, k, A, y)
    except InfeasibleObservation:
        return BatchResult(np.zeros(1), np.full(1, -np.inf), np.zeros(1, dtype=np.int64),
                           np.ones(1, dtype=bool), np.zeros(1))
    if red.trivial:
        return BatchResult(np.ones(1), np.array([red.log_correction]),
                           np.zeros(1, dtype=np.int64), np.ones(1, dtype=bool), np.zeros(1))
    sub = _stack_of(red.model)
    res, _ = _run_stack(sub, red.A, red.y[None, :].astype(float), key, cfg)
    res.log_abs = res.log_abs + red.log_correction
    return res


def estimate_density(model, A: MarginsMap, y, cfg: EstimatorConfig,
                     nu=None, stream_id=0) -> DensityEstimate:
    """
    Unbiased estimate of P(AX = y).

    The pipeline is: zero-margin reduction, saddlepoint tilt (if
    ``cfg.tilt``; a failed Newton solve falls back to no tilt and is
    reported), importance sampling of the inversion integral, and
    recombination of the prefactor exp(kappa(A^T nu) - nu'y) and the
    reduction correction.  An infeasible y returns the exact value 0.

    Passing ``nu`` tilts at that point instead of the saddlepoint; the
    expectation is unchanged whatever ``nu`` is.
    """
    y = np.asarray(y)
    key = rqmc.stream_key(cfg.seed, np.array([stream_id]))
    stack = _stack_of(model)
    Y = y.astype(float)[None, :]
    if nu is not None:
        res, _ = _run_stack(stack, A, Y, key, cfg, nu=np.asarray(nu, float)[None, :])
        nu_used = np.asarray(nu, dtype=float)
        return _to_estimate(res, nu_used, cfg)

    try:
        red = (reduce_multinomial(A, model.p, model.n, y) if isinstance(model, MultinomialModel)
               else reduce_bernoulli(A, model.q, y))
    except InfeasibleObservation:
        return DensityEstimate(0, -math.inf, np.zeros(A.d_Y), 0, 0.0, True,
                               cfg.effective_n_is, exact=True)
    if red.trivial:
        return DensityEstimate(1, float(red.log_correction), np.zeros(0), 0, 0.0, True,
                               cfg.effective_n_is, exact=True)
    sub = _stack_of(red.model)
    res, prepared = _run_stack(sub, red.A, red.y[None, :].astype(float), key, cfg)
    res.log_abs = res.log_abs + red.log_correction
    return _to_estimate(res, prepared[0].nu[0], cfg)


def _to_estimate(res: BatchResult, nu, cfg):
    return DensityEstimate(
        sign=int(res.sign[0]), log_abs=float(res.log_abs[0]), nu=np.asarray(nu),
        newton_iters=int(res.newton_iters[0]), weight_cv=float(res.weight_cv[0]),
        converged=bool(res.converged[0]), n_is=cfg.effective_n_is)


def summarize(res: BatchResult) -> tuple[float, LikelihoodDiagnostics]:
    """Total log-likelihood (fixed-order exact sum) and its diagnostics."""
    invalid = res.sign <= 0
    infeasible = (res.sign == 0) & np.isneginf(res.log_abs)
    diag = LikelihoodDiagnostics(
        n_obs=res.K,
        n_invalid=int(invalid.sum()),
        n_negative=int((res.sign < 0).sum()),
        n_infeasible=int(infeasible.sum()),
        n_newton_failed=int((~res.converged).sum()),
        max_newton_iters=int(res.newton_iters.max(initial=0)),
    )
    if diag.n_invalid:
        return -math.inf, diag
    return math.fsum(res.log_abs.tolist()), diag


def batch_log_likelihood(models, A: MarginsMap, ys, cfg: EstimatorConfig,
                         stream_ids=None) -> tuple[float, LikelihoodDiagnostics]:
    """
    Sum of log-estimates over K observations.

    Each observation draws from its own stream keyed on (seed, index), so
    the total does not depend on batching.  If any estimate is not strictly
    positive the total is -inf and ``diagnostics.valid`` is False.
    """
    res = batch_estimates(models, A, ys, cfg, stream_ids=stream_ids)
    return summarize(res)


# ---------------------------------------------------------------------------
# Variance studies
# ---------------------------------------------------------------------------

@dataclass
class ProfileRow:
    variant: str
    n: int
    N_IS: int
    rel_se_likelihood: float
    sd_loglik: float
    replications: int
    n_negative: int = 0
    label: str = ""


PROFILE_HEADER = ["variant", "n", "N_IS", "rel_se_likelihood", "sd_loglik", "replications"]


def replicate(models, A: MarginsMap, ys, cfg: EstimatorConfig, replications: int,
              stream_offset=0):
    """
    ``replications`` independent estimates for each observation.

    The saddlepoint (and proposal factorization) is computed once per
    observation; replication r uses streams keyed on (seed, k, r).

    Returns
    -------
    sign, log_abs : ndarray, shape (R, K)
    """
    stack = as_stack(models)
    Y = np.asarray(ys, dtype=float).reshape(stack.K, A.d_Y)
    K = stack.K
    flag = _needs_reduction(stack, A, Y)
    signs = np.zeros((replications, K))
    logs = np.full((replications, K), -np.inf)
    regular = np.flatnonzero(~flag)
    if regular.size:
        sub = stack.take(regular)
        ids = regular + stream_offset
        keys0 = rqmc.stream_key(cfg.seed, ids, 0)
        _, prepared = _run_stack(sub, A, Y[regular], keys0, cfg)
        for r in range(replications):
            keys = rqmc.stream_key(cfg.seed, ids, r)
            res, _ = _run_stack(sub, A, Y[regular], keys, cfg, prepared=prepared)
            signs[r, regular], logs[r, regular] = res.sign, res.log_abs
    for k in np.flatnonzero(flag):
        for r in range(replications):
            key = rqmc.stream_key(cfg.seed, np.array([k + stream_offset]), r)
            res = _estimate_reduced(_reduce_one, stack, k, A, Y[k], key, cfg)
            signs[r, k], logs[r, k] = res.sign[0], res.log_abs[0]
    return signs, logs


def replication_stats(signs, logs):
    """
    Relative standard error of the likelihood product and mean per-unit
    standard deviation of log|estimate| from (R, K) replicate arrays.
    """
    total_sign = np.prod(signs, axis=1)
    total_log = np.sum(logs, axis=1)
    finite = np.isfinite(total_log)
    if finite.sum() >= 2:
        m = total_log[finite].max()
        vals = np.where(finite, total_sign * np.exp(np.where(finite, total_log - m, 0.0)), 0.0)
        mean = vals.mean()
        rel_se = vals.std(ddof=1) / abs(mean) if mean != 0 else math.inf
    else:
        rel_se = math.nan
    with np.errstate(invalid="ignore"):
        per_unit = np.std(logs, axis=0, ddof=1)
    per_unit = per_unit[np.isfinite(per_unit)]
    sd = float(per_unit.mean()) if per_unit.size else math.nan
    return float(rel_se), sd


def variance_profile(model_generator: Callable[[int], Sequence], A: MarginsMap,
                     configs: Sequence[EstimatorConfig], n_grid: Sequence[int],
                     replications: int, K: int = 1, seed: int = 0,
                     observations: Callable | None = None) -> list[ProfileRow]:
    """
    Replicated variance study of the estimators.

    For each n, ``model_generator(n)`` returns K models; observations are
    drawn as y_k = A x_k with x_k sampled from the k-th model (unless
    ``observations(n, models, rng)`` supplies them).  Each configuration
    then estimates all K likelihoods ``replications`` times.

    Reports, per (variant, n), the relative standard error of the product
    likelihood across replications and the per-observation standard
    deviation of the log-estimate averaged over observations.
    """
    rows = []
    for n in n_grid:
        models = list(model_generator(int(n)))
        rng = rqmc.stream_rng(seed, int(n), 7919)
        if observations is None:
            ys = np.array([A.apply(m.sample(rng)) for m in models])
        else:
            ys = np.asarray(observations(int(n), models, rng))
        for cfg in configs:
            signs, logs = replicate(models, A, ys, cfg, replications)
            rel_se, sd = replication_stats(signs, logs)
            rows.append(ProfileRow(cfg.name + ("-rqmc" if cfg.use_rqmc else ""), int(n),
                                   cfg.effective_n_is, rel_se, sd, replications,
                                   n_negative=int((signs < 0).sum())))
    return rows


def profile_csv(rows: Sequence[ProfileRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROFILE_HEADER)
    for r in rows:
        w.writerow([r.variant, r.n, r.N_IS, repr(r.rel_se_likelihood),
                    repr(r.sd_loglik), r.replications])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Gaussian approximate model
# ---------------------------------------------------------------------------

def gaussian_model_logpdf(model: MultinomialModel, A: MarginsMap, y) -> float:
    """
    Log-density at y of the normal law matching the first two moments of AX.

    Raises
    ------
    numpy.linalg.LinAlgError
        If A Var(X) A^T is singular.
    """
    mom = model.moments()
    mu = A.apply(mom.mean)
    S = A.dense @ mom.cov @ A.dense.T
    L = np.linalg.cholesky(S)
    r = np.linalg.solve(L, np.asarray(y, dtype=float) - mu)
    d = A.d_Y
    return float(-0.5 * d * LOG_2PI - np.sum(np.log(np.diag(L))) - 0.5 * r @ r)


def gaussian_model_logpdf_batch(stack: MultinomialStack, A: MarginsMap, ys):
    """
    Row-wise ``gaussian_model_logpdf`` for a stack; returns (K,).

    Rows whose covariance is not positive definite get -inf instead of
    raising.
    """
    q = np.exp(stack.logp)
    mean = stack.n[:, None] * q
    S = stack.margin_cov(A, np.zeros_like(q))
    ok = np.ones(stack.K, dtype=bool)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        L = np.broadcast_to(np.eye(A.d_Y), S.shape).copy()
        for k in range(stack.K):
            try:
                L[k] = np.linalg.cholesky(S[k])
            except np.linalg.LinAlgError:
                ok[k] = False
    r = np.asarray(ys, dtype=float) - A.apply(mean)
    z = np.linalg.solve(L, r[..., None])[..., 0]
    logdet = np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    out = -0.5 * A.d_Y * LOG_2PI - logdet - 0.5 * np.sum(z * z, axis=1)
    return np.where(ok, out, -np.inf)


__all__ = [
    "EstimatorConfig", "SaddlepointSolution", "DensityEstimate", "BatchResult",
    "LikelihoodDiagnostics", "ProfileRow", "VARIANTS", "solve_saddlepoint",
    "estimate_density", "batch_estimates", "batch_log_likelihood", "summarize",
    "replicate", "replication_stats", "variance_profile", "profile_csv",
    "gaussian_model_logpdf", "gaussian_model_logpdf_batch",
]
