"""
Variance studies of the likelihood estimators on I x I voting tables.

Each study returns ``ProfileRow`` records (see ``estimator.variance_profile``)
whose ``variant`` field names the estimator, prefixed by a setting label
where the study compares settings (family and alpha, or mode vs tail).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .aggregation import margins_matrix
from .estimator import EstimatorConfig, ProfileRow, replicate, replication_stats, variance_profile
from .ei_models import prob_family
from .models import MultinomialModel
from . import rqmc

ALL_VARIANTS = ("uniform", "uniform-tilt", "gaussian", "gaussian-tilt")


def table_model(n, P):
    """Multinomial model of an I x J table with cell matrix P (column-major cells)."""
    return MultinomialModel(int(n), np.asarray(P, dtype=float).ravel(order="F"))


def _map(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def relative_se_study(n_grid=(50, 200, 1000), K=100, n_is=10, replications=1000, I=3,
                      variants=ALL_VARIANTS, seed=0, threads=1, use_rqmc=False):
    """
    Relative standard error of the product likelihood of K tables with
    uniform cell probabilities, for each estimator variant and n.
    """
    A = margins_matrix(I, I)
    P = np.full((I, I), 1.0 / I**2)

    def one(n):
        cfgs = [EstimatorConfig.variant(v, n_is=n_is, seed=seed, use_rqmc=use_rqmc)
                for v in variants]
        return variance_profile(lambda m: [table_model(m, P)] * K, A, cfgs, [n],
                                replications, K=K, seed=seed)

    return [r for rows in _map(one, n_grid, threads) for r in rows]


def loglik_vs_n_study(n_grid=(50, 200, 1000), n_is=20000, replications=100, I=3,
                      variants=("uniform-tilt", "gaussian-tilt"), seed=0, threads=1):
    """Standard deviation of the log-estimate of a single table as n grows."""
    return relative_se_study(n_grid, K=1, n_is=n_is, replications=replications, I=I,
                             variants=variants, seed=seed, threads=threads)


def families_study(alphas=(1, 2, 5, 10), kinds=("type1", "type2"), n=3000, K=200,
                   n_is=1000, replications=200, I=3, variant="gaussian-tilt",
                   seed=0, threads=1):
    """
    Log-likelihood standard deviation of K tables under the two asymmetric
    probability families, as alpha grows.
    """
    A = margins_matrix(I, I)
    cfg = EstimatorConfig.variant(variant, n_is=n_is, seed=seed)

    def one(item):
        kind, alpha = item
        P = prob_family(kind, alpha, I)
        rows = variance_profile(lambda m: [table_model(m, P)] * K, A, [cfg], [n],
                                replications, K=K, seed=seed)
        return [replace(r, variant=f"{kind}-a{alpha:g}:{r.variant}", label=kind) for r in rows]

    items = [(k, a) for k in kinds for a in alphas]
    return [r for rows in _map(one, items, threads) for r in rows]


def tail_study(n=1000, K=200, n_is=1000, replications=200, I=3, tail_alpha=3.0,
               variants=("gaussian-tilt", "gaussian"), seed=0, threads=1):
    """
    Log-likelihood standard deviation under a uniform model, for observations
    drawn from the model itself ("mode") and from the type1 family with
    ``tail_alpha`` ("tail"), whose margins sit in the model's tail.
    """
    A = margins_matrix(I, I)
    model = table_model(n, np.full((I, I), 1.0 / I**2))
    tail_model = table_model(n, prob_family("type1", tail_alpha, I))
    rng_mode = rqmc.stream_rng(seed, n, 1)
    rng_tail = rqmc.stream_rng(seed, n, 2)
    obs = {
        "mode": np.array([A.apply(model.sample(rng_mode)) for _ in range(K)]),
        "tail": np.array([A.apply(tail_model.sample(rng_tail)) for _ in range(K)]),
    }

    def one(item):
        where, v = item
        cfg = EstimatorConfig.variant(v, n_is=n_is, seed=seed)
        signs, logs = replicate([model] * K, A, obs[where], cfg, replications)
        rel_se, sd = replication_stats(signs, logs)
        return ProfileRow(f"{where}:{cfg.name}", n, cfg.effective_n_is, rel_se, sd,
                          replications, n_negative=int((signs < 0).sum()), label=where)

    items = [(w, v) for w in ("mode", "tail") for v in variants]
    return _map(one, items, threads)


def rqmc_variance(n=100, K=1, n_is=64, shifts=200, I=3, seed=0):
    """
    Variance over independent randomizations of the tilted-Gaussian estimate
    of one table's probability, with plain Monte Carlo and with shifted Sobol
    points at equal N.

    Returns ``(var_mc, var_rqmc, mean_mc, mean_rqmc)``.
    """
    A = margins_matrix(I, I)
    model = table_model(n, np.full((I, I), 1.0 / I**2))
    rng = rqmc.stream_rng(seed, n, 3)
    y = np.array([A.apply(model.sample(rng)) for _ in range(K)])
    out = []
    for use in (False, True):
        cfg = EstimatorConfig.variant("gaussian-tilt", n_is=n_is, seed=seed, use_rqmc=use)
        signs, logs = replicate([model] * K, A, y, cfg, shifts)
        vals = (signs * np.exp(logs)).prod(axis=1)
        out.append((float(vals.var(ddof=1)), float(vals.mean())))
    return out[0][0], out[1][0], out[0][1], out[1][1]
