"""
``spmc`` command line.

Every command writes CSV (to ``--out`` or standard output).  Files written
with ``--out`` are replaced atomically and get a ``.meta.json`` sidecar
recording the package version, the seed and the flags.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, data_prep, rqmc, studies
from .aggregation import (InfeasibleObservation, MarginsMap, dedupe_rows, identity_map,
                          independent_rows, margins_matrix)
from .ei_models import ModelSpec, StationData, prob_family, synth_generate, transition_summary
from .estimator import (EstimatorConfig, estimate_density, profile_csv, replicate)
from .inference import (AdamSchedule, EITarget, InvalidEstimate, hessian_at, adam_map,
                        LaplaceApprox, log10_bayes_factor, pmmh, random_weight_is)
from .models import BernoulliVectorModel, MultinomialModel

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
SEED_ENV = "SPMC_SEED"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _flags(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def write_output(args, text: str, path=None, name=None):
    """Write ``text`` to ``path`` (or ``--out``/name) atomically with a sidecar; else print."""
    target = path
    if target is None and args.out is not None:
        target = Path(args.out) / name if name else Path(args.out)
    if target is None:
        sys.stdout.write(text)
        return
    data_prep.atomic_write_text(target, text)
    meta = {"version": __version__, "seed": args.seed, "command": args.command,
            "flags": _flags(args)}
    data_prep.atomic_write_text(data_prep.sidecar_path(target),
                                json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def read_model_file(path):
    """
    Parse a ``key = value`` model description.

    Keys: ``family`` (multinomial or bernoulli), ``n`` (multinomial),
    ``p`` or ``q`` (comma list, or ``uniform``; for multinomial tables also
    ``type1:<alpha>`` / ``type2:<alpha>``), ``I`` and ``J`` (table shape,
    cells flattened column-major), and optionally ``margins``
    (``drop_last``, ``full`` or ``identity``).  Lines starting with ``#``
    are comments.

    Returns ``(model, A)``.
    """
    kv = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise data_prep.DatasetParseError(path, lineno, "expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            kv[k] = v
    family = kv.get("family", "multinomial")
    try:
        I, J = int(kv.get("I", 0)), int(kv.get("J", 1))
    except ValueError:
        raise data_prep.DataError("I and J must be integers") from None
    d = I * J
    if d < 1:
        raise data_prep.DataError("model file needs I (and J) with I*J >= 1")
    probs = kv.get("p" if family == "multinomial" else "q", "uniform")
    if probs == "uniform":
        vals = np.full(d, 1.0 / d) if family == "multinomial" else np.full(d, 0.5)
    elif probs.startswith(("type1:", "type2:")):
        if I != J:
            raise data_prep.DataError("probability families need I == J")
        kind, alpha = probs.split(":")
        vals = prob_family(kind, float(alpha), I).ravel(order="F")
    else:
        vals = np.array(_floats(probs))
    if vals.size != d:
        raise data_prep.DataError(f"expected {d} probabilities, got {vals.size}")
    if family == "multinomial":
        model = MultinomialModel(int(kv.get("n", 0)), vals)
    elif family == "bernoulli":
        model = BernoulliVectorModel(vals)
    else:
        raise data_prep.DataError(f"unknown family {family!r}")
    margins = kv.get("margins", "identity" if I * J == 1 or J == 1 else "drop_last")
    if margins == "identity":
        A = identity_map(d)
    elif margins in ("drop_last", "full"):
        A = margins_matrix(I, J, drop_last=(margins == "drop_last"))
    else:
        raise data_prep.DataError(f"unknown margins {margins!r}")
    return model, A


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

ESTIMATE_HEADER = ["sign", "log_abs", "value", "newton_iters", "weight_cv", "converged",
                   "n_is", "exact"]


def _config(args, **kw):
    return EstimatorConfig(proposal=args.proposal, tilt=args.tilt, n_is=args.n_is,
                           use_rqmc=args.rqmc, seed=args.seed, **kw)


def cmd_estimate(args):
    model, A = read_model_file(args.model_file)
    y = np.array(_ints(args.y))
    if y.size != A.d_Y:
        raise UsageError(f"--y needs {A.d_Y} values, got {y.size}")
    est = estimate_density(model, A, y, _config(args))
    if est.exact and est.sign == 0:
        raise InfeasibleObservation("observation has probability zero under the model")
    row = [est.sign, float(est.log_abs), float(est.value), est.newton_iters,
           float(est.weight_cv), int(est.converged), est.n_is, int(est.exact)]
    write_output(args, csv_text(ESTIMATE_HEADER, [row]))


def cmd_bench(args):
    common = dict(seed=args.seed, threads=args.threads)
    if args.replications:
        common["replications"] = args.replications
    if args.n_is:
        common["n_is"] = args.n_is
    if args.study == "fig1":
        rows = studies.relative_se_study(n_grid=_ints(args.n_grid or "50,200,1000"),
                                  K=args.K or 100, **common)
    elif args.study == "loglik-vs-n":
        rows = studies.loglik_vs_n_study(n_grid=_ints(args.n_grid or "50,200,1000"), **common)
    elif args.study == "families":
        rows = studies.families_study(alphas=_floats(args.alphas), n=args.n or 3000,
                                      K=args.K or 200, **common)
    else:
        rows = studies.tail_study(n=args.n or 1000, K=args.K or 200, **common)
    write_output(args, profile_csv(rows))


def _schedule(args):
    return AdamSchedule.scaled(args.schedule_scale)


def _target(args, spec, data):
    cfg = EstimatorConfig(n_is=args.n_is, seed=args.seed)
    return EITarget(spec, data.stations, cfg)


def _fit_map(args, target):
    s = _schedule(args)
    res = adam_map(target, s, seed=args.seed)
    H = hessian_at(target, res.mode, int(rqmc.stream_key(args.seed, 3)),
                   n_is=s.phase2_nis_late)
    return LaplaceApprox(res.mode, H), res


def cmd_fit(args):
    data = data_prep.load_dataset(args.data)
    spec = ModelSpec(f"model{args.model}", data.I, data.J)
    target = _target(args, spec, data)
    approx, res = _fit_map(args, target)
    names = spec.param_names
    map_rows = [[nm, float(approx.mode[i])] + [float(h) for h in approx.hessian[i]]
                for i, nm in enumerate(names)]
    write_output(args, csv_text(["param", "mode"] + [f"hess_{nm}" for nm in names], map_rows),
                 name="map.csv")
    samples = []
    if args.stage in ("is", "all"):
        samples.append(("is", random_weight_is(target, approx, args.is_draws, seed=args.seed)))
    if args.stage in ("pmmh", "all"):
        samples.append(("pmmh", pmmh(target, approx.mode, approx, args.pmmh_steps,
                                     seed=args.seed)))
    for label, post in samples:
        draws, w = post.draws, post.normalized_weights()
        if post.accepted is None:
            col = [float(v) for v in post.log_weights]
        else:
            col = [int(v) for v in post.accepted]
        header = ["draw_index", "log_weight_or_accept"] + list(names)
        rows = [[t, c] + [float(v) for v in draws[t]] for t, c in enumerate(col)]
        write_output(args, csv_text(header, rows), name=f"posterior_{label}.csv")
        q = transition_summary(spec, draws, w, covariate=0.0 if spec.variant == "model3" else None)
        trows = [[data.options1[i], data.options2[j]] + [float(v) for v in q[i, j]]
                 for i in range(spec.I) for j in range(spec.J)]
        write_output(args, csv_text(["from", "to", "q05", "q50", "q95"], trows),
                     name=f"transitions_{label}.csv")
    if args.out is None:
        return
    summary = [["n_invalid_map", res.n_invalid]]
    for label, post in samples:
        summary += [[f"{label}_ess", float(post.ess)], [f"{label}_n_invalid", post.n_invalid]]
        if post.log_marginal_likelihood is not None:
            summary += [[f"{label}_logZ", post.log_marginal_likelihood],
                        [f"{label}_logZ_se", post.log_marginal_se]]
        if post.accepted is not None:
            summary.append([f"{label}_acceptance", post.acceptance_rate])
    write_output(args, csv_text(["key", "value"], summary), name="summary.csv")


COMPARE_HEADER = ["model_a", "model_b", "logZ_a", "logZ_a_se", "logZ_b", "logZ_b_se",
                  "log10_bf", "log10_bf_se"]


def evidence(args, data, model):
    spec = ModelSpec(f"model{model}", data.I, data.J)
    target = _target(args, spec, data)
    approx, _ = _fit_map(args, target)
    post = random_weight_is(target, approx, args.is_draws, seed=args.seed)
    return post.log_marginal_likelihood, post.log_marginal_se


def cmd_compare(args):
    models = _ints(args.models)
    if len(models) != 2 or any(m not in (1, 2, 3) for m in models):
        raise UsageError("--models takes two model numbers, e.g. 3,2")
    data = data_prep.load_dataset(args.data)
    (za, sa), (zb, sb) = (evidence(args, data, m) for m in models)
    bf = log10_bayes_factor(za, zb)
    se = math.hypot(sa, sb) / math.log(10.0)
    write_output(args, csv_text(COMPARE_HEADER, [[models[0], models[1], za, sa, zb, sb, bf, se]]))


COUNT_HEADER = ["estimate", "std_error", "replications", "N_IS"]


def count_tables(rows, cols, n_is=1024, replications=100, seed=0):
    """
    Estimated number of 0/1 matrices with the given row and column sums.

    Returns ``(estimate, standard_error)`` from ``replications``
    independent tilted-Gaussian estimates of P(AX = y) for X with iid
    Bernoulli(1/2) cells, times 2**(I*J).
    """
    I, J = len(rows), len(cols)
    if I < 1 or J < 1:
        raise UsageError("need at least one row and one column")
    if sum(rows) != sum(cols) or min(rows + cols) < 0 or max(rows) > J or max(cols) > I:
        return 0.0, 0.0
    sets = [[i + I * j for j in range(J)] for i in range(I)]
    sets += [[i + I * j for i in range(I)] for j in range(J)]
    try:
        uniq, y = independent_rows(*dedupe_rows(sets, list(rows) + list(cols)), I * J)
    except InfeasibleObservation:
        return 0.0, 0.0
    A = MarginsMap(I * J, uniq)
    model = BernoulliVectorModel(np.full(I * J, 0.5))
    cfg = EstimatorConfig(n_is=n_is, seed=seed)
    signs, logs = replicate([model], A, y[None, :], cfg, replications)
    vals = (signs * np.exp(logs))[:, 0] * 2.0 ** (I * J)
    se = float(vals.std(ddof=1) / math.sqrt(replications)) if replications > 1 else math.nan
    return float(vals.mean()), se


def cmd_count_tables(args):
    est, se = count_tables(_ints(args.rows), _ints(args.cols), args.n_is, args.replications,
                           args.seed)
    write_output(args, csv_text(COUNT_HEADER, [[est, se, args.replications, args.n_is]]))


def cmd_prep(args):
    if args.out is None:
        raise UsageError("prep needs --out")
    data = data_prep.prepare(args.round1, args.round2, group_key=args.group_key,
                             station_threshold=args.station_threshold,
                             candidate_share=args.candidate_share,
                             covariates_path=args.covariates, exclusions_path=args.exclude)
    data_prep.emit_dataset(data, args.out, extra_meta={
        "version": __version__, "seed": args.seed, "flags": _flags(args)})
    rej = args.rejections or str(args.out) + ".rejections.csv"
    data_prep.write_rejections(data.rejections, rej)


def cmd_synth(args):
    if args.out is None:
        raise UsageError("synth needs --out")
    spec = ModelSpec(f"model{args.model}", args.I, args.J)
    if args.params:
        params = np.array(_floats(args.params))
    else:
        params = rqmc.stream_rng(args.seed, 9).standard_normal(spec.n_params)
    if params.size != spec.n_params:
        raise UsageError(f"model needs {spec.n_params} parameters, got {params.size}")
    stations = synth_generate(spec, params, args.K, args.n, seed=args.seed)
    if spec.variant != "model3" and not args.covariate:
        stations = [StationData(s.station_id, s.round1, s.round2) for s in stations]
    data = data_prep.ElectionData(stations, [f"a{i + 1}" for i in range(spec.I)],
                                  [f"b{j + 1}" for j in range(spec.J)])
    data_prep.emit_dataset(data, args.out, extra_meta={
        "true_params": [float(v) for v in params], "param_names": list(spec.param_names),
        "model": spec.variant, "seed": args.seed, "version": __version__,
        "flags": _flags(args)})


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _bool(text):
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_fit_flags(p):
    p.add_argument("--data", required=True)
    p.add_argument("--n-is", type=int, default=128, help="importance draws per station")
    p.add_argument("--schedule-scale", type=float, default=1.0,
                   help="multiply the default Adam iteration counts")
    p.add_argument("--is-draws", type=int, default=1000)


def build_parser():
    parser = argparse.ArgumentParser(prog="spmc", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    glob = argparse.ArgumentParser(add_help=False)
    glob.add_argument("--seed", type=int, default=None,
                      help=f"random seed (default: ${SEED_ENV}, else 0)")
    glob.add_argument("--threads", type=int, default=1)
    glob.add_argument("--out", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", parents=[glob], help="estimate P(AX = y) for one model")
    p.add_argument("--model-file", required=True)
    p.add_argument("--y", required=True, help="comma-separated observation")
    p.add_argument("--proposal", choices=("uniform", "gaussian"), default="gaussian")
    p.add_argument("--tilt", type=_bool, default=True)
    p.add_argument("--n-is", type=int, default=128)
    p.add_argument("--rqmc", action="store_true")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", parents=[glob], help="estimator variance studies")
    p.add_argument("--study", choices=("fig1", "loglik-vs-n", "families", "tail"), required=True)
    p.add_argument("--n-grid", default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--n-is", type=int, default=None)
    p.add_argument("--replications", type=int, default=None)
    p.add_argument("--alphas", default="1,2,5,10")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("fit", parents=[glob], help="fit a model to a dataset")
    _add_fit_flags(p)
    p.add_argument("--model", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--stage", choices=("map", "is", "pmmh", "all"), default="is")
    p.add_argument("--pmmh-steps", type=int, default=5000)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", parents=[glob], help="Bayes factor between two models")
    _add_fit_flags(p)
    p.add_argument("--models", required=True, help="two model numbers, e.g. 3,2")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("count-tables", parents=[glob], help="count 0/1 matrices with given margins")
    p.add_argument("--rows", required=True)
    p.add_argument("--cols", required=True)
    p.add_argument("--n-is", type=int, default=1024)
    p.add_argument("--replications", type=int, default=100)
    p.set_defaults(func=cmd_count_tables)

    p = sub.add_parser("prep", parents=[glob], help="clean two election rounds")
    p.add_argument("--round1", required=True)
    p.add_argument("--round2", required=True)
    p.add_argument("--group-key", choices=("department", "constituency"), default="department")
    p.add_argument("--station-threshold", type=int, default=70)
    p.add_argument("--candidate-share", type=float, default=0.05)
    p.add_argument("--covariates", default=None)
    p.add_argument("--exclude", default=None, help="file with one station id per line")
    p.add_argument("--rejections", default=None)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("synth", parents=[glob], help="simulate a dataset")
    p.add_argument("--model", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--I", type=int, default=2)
    p.add_argument("--J", type=int, default=2)
    p.add_argument("--K", type=int, default=100)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--params", default=None)
    p.add_argument("--covariate", action="store_true",
                   help="keep the simulated covariate for model1/model2 data")
    p.set_defaults(func=cmd_synth)
    return parser


def resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.seed = resolve_seed(args.seed)
        if args.threads < 1:
            raise UsageError("--threads must be positive")
        args.func(args)
    except UsageError as exc:
        print(f"spmc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data_prep.DataError, InfeasibleObservation, FileNotFoundError, ValueError) as exc:
        print(f"spmc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvalidEstimate, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"spmc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
