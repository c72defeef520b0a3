"""
Independent reference computations used by the tests.

Everything here is brute force: enumeration of contingency tables, exact
multinomial probabilities, and grid quadrature.  None of it calls into the
estimator, so agreement with the package is a genuine cross-check.
"""

import itertools
import math
from functools import lru_cache

import numpy as np
from scipy.special import gammaln, logsumexp

from spmc.inference import Target


@lru_cache(maxsize=None)
def compositions(n, d):
    """All length-d non-negative integer vectors summing to n, as an array."""
    out = []
    for bars in itertools.combinations(range(n + d - 1), d - 1):
        prev, parts = -1, []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(n + d - 2 - prev)
        out.append(parts)
    arr = np.array(out, dtype=np.int64).reshape(-1, d)
    arr.setflags(write=False)
    return arr


def multinomial_logpmf(x, n, p):
    x = np.asarray(x)
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(p, dtype=float))
    terms = np.where(x > 0, x * logp, 0.0)
    return gammaln(n + 1) - gammaln(x + 1).sum(axis=-1) + terms.sum(axis=-1)


def table_margins(X, I, J):
    """Row and column sums of column-major flattened I x J tables."""
    T = np.asarray(X).reshape(-1, J, I)
    return T.sum(axis=1), T.sum(axis=2)


def margin_probability(p, n, I, J, rows, cols):
    """P(row sums = rows, column sums = cols) for X ~ M(n, p), by enumeration."""
    X = compositions(n, I * J)
    R, S = table_margins(X, I, J)
    hit = np.all(R == np.asarray(rows), axis=1) & np.all(S == np.asarray(cols), axis=1)
    if not hit.any():
        return 0.0
    return float(np.exp(logsumexp(multinomial_logpmf(X[hit], n, p))))


def margin_distribution(p, n, I, J):
    """{(rows, cols): probability} over every reachable pair of margins."""
    X = compositions(n, I * J)
    R, S = table_margins(X, I, J)
    lp = multinomial_logpmf(X, n, p)
    out = {}
    for r, s, v in zip(map(tuple, R), map(tuple, S), np.exp(lp)):
        out[(r, s)] = out.get((r, s), 0.0) + v
    return out


def count_binary_matrices(rows, cols):
    """Number of 0/1 matrices with the given row and column sums."""
    I, J = len(rows), len(cols)
    count = 0
    for bits in itertools.product((0, 1), repeat=I * J):
        M = np.array(bits).reshape(I, J)
        if np.array_equal(M.sum(axis=1), rows) and np.array_equal(M.sum(axis=0), cols):
            count += 1
    return count


def conditional_station_loglik(P_cond, r, s):
    """
    Exact log P(column sums = s | row sums = r) when row i of the table is
    M(r_i, P_cond[i]), by enumerating tables with the given row sums.
    """
    I, J = P_cond.shape
    per_row = [compositions(int(r[i]), J) for i in range(I)]
    total = -math.inf
    for rows in itertools.product(*per_row):
        T = np.array(rows)
        if not np.array_equal(T.sum(axis=0), s):
            continue
        lp = sum(multinomial_logpmf(T[i], r[i], P_cond[i]) for i in range(I))
        total = np.logaddexp(total, lp)
    return float(total)


def model2_exact_loglik(vec, stations, I, J):
    """
    Exact model2 log-likelihood: the table is M(n, p) with
    p_ij = (r_i / n) p_{j|i}, observed through both margins.
    """
    logits = np.concatenate([np.zeros((I, 1)), np.asarray(vec, float).reshape(I, J - 1)], axis=1)
    P = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    total = 0.0
    for st in stations:
        n = st.n
        p = (st.round1[:, None] / n * P).T.ravel()
        total += math.log(margin_probability(p, n, I, J, st.round1, st.round2))
    return total


class ExactModel2Target(Target):
    """Posterior with the exact (enumerated) model2 likelihood."""

    def __init__(self, stations, I, J, prior_sigma2=2.0):
        self.stations = list(stations)
        self.I, self.J = I, J
        self.n_params = I * (J - 1)
        self.K = len(self.stations)
        self.prior_sigma2 = prior_sigma2

    def log_lik_batch(self, vecs, seed, n_is=None, idx=None, fresh=False):
        vecs = np.atleast_2d(vecs)
        sts = self.stations if idx is None else [self.stations[i] for i in idx]
        ll = np.array([model2_exact_loglik(v, sts, self.I, self.J) for v in vecs])
        return ll, np.zeros(len(vecs), dtype=np.int64)


def grid_posterior_moments(log_post, lo, hi, m=121):
    """
    Mean, sd and log normalizer of a 2-d density by tensor Gauss-Legendre
    quadrature on [lo, hi]^2.
    """
    x, w = np.polynomial.legendre.leggauss(m)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    g0 = 0.5 * (hi[0] - lo[0]) * x + 0.5 * (hi[0] + lo[0])
    g1 = 0.5 * (hi[1] - lo[1]) * x + 0.5 * (hi[1] + lo[1])
    w0 = 0.5 * (hi[0] - lo[0]) * w
    w1 = 0.5 * (hi[1] - lo[1]) * w
    G0, G1 = np.meshgrid(g0, g1, indexing="ij")
    L = np.array([[log_post(np.array([a, b])) for b in g1] for a in g0])
    logW = np.log(w0)[:, None] + np.log(w1)[None, :]
    logZ = logsumexp(L + logW)
    dens = np.exp(L + logW - logZ)
    mean = np.array([np.sum(dens * G0), np.sum(dens * G1)])
    var = np.array([np.sum(dens * (G0 - mean[0]) ** 2), np.sum(dens * (G1 - mean[1]) ** 2)])
    return mean, np.sqrt(var), float(logZ)


def model2_2x2_loglik(thetas, stations):
    """
    Exact model2 log-likelihood of 2 x 2 stations for many parameter
    vectors at once.  Row i puts Binomial(r_i, sigmoid(theta_i)) votes in
    column 2, so the column margin is a convolution of two binomials.
    """
    from scipy.special import expit
    from scipy.stats import binom, multinomial

    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    q = expit(thetas)
    total = np.zeros(len(thetas))
    for st in stations:
        r1, r2 = (int(v) for v in st.round1)
        s2 = int(st.round2[1])
        n = r1 + r2
        x = np.arange(max(0, s2 - r2), min(r1, s2) + 1)
        terms = (binom.logpmf(x[None, :], r1, q[:, :1])
                 + binom.logpmf(s2 - x[None, :], r2, q[:, 1:]))
        rows_term = multinomial.logpmf([r1, r2], n, [r1 / n, r2 / n]) if n else 0.0
        total += logsumexp(terms, axis=1) + rows_term
    return total
