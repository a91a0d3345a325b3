"""Batch command-line front end.

Subcommands: ``describe`` (missingness patterns), ``fit`` (GEE, weighted
GEE or GLMM under a data-handling strategy), ``endpoint`` (single-occasion
tests), ``scan`` (quadrature sensitivity) and ``simulate`` (bias/coverage
studies). Tables go to stdout as CSV. Exit codes: 0 success, 1 usage or
input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import io
import json
import os
import re
import sys
import warnings

import numpy as np

from .dataset import (ALL_MISSING, CATEGORICAL, COMPLETE, CONTINUOUS, INTERMITTENT, MONOTONE,
                      DataError, load_long_csv, pattern_kinds, pattern_table)
from .gee import ConvergenceError, fit_gee
from .glm import RankDeficientError, SeparationError
from .glmm import (ADAPTIVE, NEWTON_RAPHSON, NONADAPTIVE, QUASI_NEWTON, GlmmConvergenceError,
                   GlmmSpec, QuadratureError, fit_glmm, quadrature_scan)
from .inference import build_contrasts, contrast_test, endpoint_analysis, wald_test
from .prep import complete_case, drop_all_missing, locf_impute
from .sim import SimSpec, builtin_estimators, replicate_study
from .wgee import fit_wgee

DEFAULT_FORMULA = "y ~ 0 + visit + visit:trt"
NUMERICAL = (ConvergenceError, GlmmConvergenceError, QuadratureError, SeparationError,
             RankDeficientError, np.linalg.LinAlgError, FloatingPointError, ArithmeticError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads():
    try:
        return max(1, int(os.environ.get("LONGIT_THREADS", "1")))
    except ValueError:
        raise UsageError("LONGIT_THREADS must be an integer") from None


def _executor():
    k = _threads()
    return concurrent.futures.ThreadPoolExecutor(max_workers=k) if k > 1 else None


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _references(items):
    refs = {}
    for it in items or ():
        if "=" not in it:
            raise UsageError(f"--reference expects NAME=LEVEL, got {it!r}")
        k, v = it.split("=", 1)
        refs[k.strip()] = v.strip()
    return refs


def _load(args):
    schema = {c: CATEGORICAL for c in _csv_list(args.categorical or "")}
    schema.update({c: CONTINUOUS for c in _csv_list(args.continuous or "")})
    return load_long_csv(args.data, schema, treatment=args.treatment)


def _emit(rows, header, out=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    sys.stdout.write(text)
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _num(v, digits=6):
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return ""
    return f"{float(v):.{digits}f}"


_GROUP = {COMPLETE: "Completers", MONOTONE: "Dropouts", ALL_MISSING: "Dropouts",
          INTERMITTENT: "Non-monotone"}


def cmd_describe(args):
    ds = _load(args)
    if ds.N == 0:
        raise DataError("dataset has no subjects")
    kinds = pattern_kinds(ds)
    rows = [[_GROUP[kinds[r.pattern]], r.pattern, r.count, f"{r.percent:.2f}"]
            for r in pattern_table(ds)]
    rows.append(["Total", "", ds.N, "100.00"])
    _emit(rows, ["group", "pattern", "count", "percent"], args.out)
    return 0


_SAT = re.compile(r"^(?:visit|occasion)\[([^\]]+)\]$")
_SAT_TRT = re.compile(r"^(?:visit|occasion)\[([^\]]+)\]:(\w+)\[([^\]]+)\]$")


def _label(col, treatment, n_arms):
    m = _SAT.match(col)
    if m:
        return f"Int. {m.group(1)}"
    m = _SAT_TRT.match(col)
    if m and m.group(2) == treatment:
        suffix = "" if n_arms <= 2 else f" ({m.group(3)})"
        return f"Trt. {m.group(1)}{suffix}"
    return col


def _prepare(ds, strategy):
    if strategy == "cc":
        return complete_case(ds), 0
    if strategy == "locf":
        return locf_impute(ds, return_dropped=True)
    return drop_all_missing(ds)


def _validate_fit(args):
    if args.model == "wgee" and args.strategy != "observed":
        raise UsageError("--model wgee requires --strategy observed "
                         "(weights are meaningless after deletion or imputation)")
    if args.weights and args.model != "wgee":
        raise UsageError("--weights applies to --model wgee only")
    if args.dropout_covariates and args.model != "wgee":
        raise UsageError("--dropout-covariates applies to --model wgee only")
    if args.model != "glmm" and (args.quadrature or args.Q or args.optimizer):
        raise UsageError("--quadrature/--Q/--optimizer apply to --model glmm only")
    if args.Q is not None and not 1 <= args.Q <= 100:
        raise UsageError("--Q must be in 1..100")


def _test_rows(fit, arms, robust=True):
    rows = []
    active = [a for a in arms[1:]]
    plans = [(k, a) for k in ("joint-per-arm", "average-per-arm") for a in active]
    if len(active) > 1:
        plans += [("joint-both-arms", None), ("average-both-arms", None)]
    plans.append(("last-occasion", None))
    for kind, arm in plans:
        r = contrast_test(fit, kind, arm, robust=robust)
        rows.append([kind, arm or "all", _num(r.statistic), r.df, _num(r.p_value),
                     _num(r.estimate), _num(r.se)])
    return rows


def cmd_fit(args):
    _validate_fit(args)
    ds = _load(args)
    refs = _references(args.reference)
    notes = []
    data, dropped = _prepare(ds, args.strategy)
    if dropped:
        notes.append(f"excluded {dropped} subject(s) without observed outcomes")
    status = 0
    if args.model == "glmm":
        spec = GlmmSpec(args.formula, args.quadrature or ADAPTIVE, args.Q,
                        args.optimizer or QUASI_NEWTON, references=refs or None)
        fit = fit_glmm(data, spec)
        rows = [[_label(c, ds.treatment_name, len(ds.arms)), _num(b), _num(s)]
                for c, b, s in zip(fit.columns, fit.beta, fit.se)]
        rows.append(["R.I. s.d.", _num(fit.sigma), _num(fit.sigma_se)])
        rows.append(["R.I. var.", _num(fit.sigma2), _num(fit.sigma2_se)])
        header = ["parameter", "estimate", "se"]
        notes.append(f"loglik={fit.loglik:.6f} quadrature={fit.quadrature} Q={fit.n_points} "
                     f"optimizer={fit.optimizer} iterations={fit.iterations} "
                     f"gradient={fit.grad_norm:.2e}")
        if fit.at_boundary:
            notes.append("random-intercept SD at the boundary")
        if fit.seemingly_converged:
            notes.append("only seemingly converged: Hessian not negative definite")
        if not fit.converged:
            notes.append("GLMM did not converge")
            status = 2
        robust = False
    else:
        if args.model == "wgee":
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                fit = fit_wgee(data, args.formula, args.corr, mode=args.weights or "occasion",
                               dropout_covariates=_csv_list(args.dropout_covariates or ""),
                               references=refs or None, dropout_references=refs or None,
                               small_sample=args.small_sample)
            notes += [str(w.message) for w in caught]
            ex = fit.excluded
            if ex["first_missing"] or ex["discarded_observations"]:
                notes.append(f"excluded {ex['first_missing']} subject(s) missing the first "
                             f"occasion; discarded {ex['discarded_observations']} "
                             "observation(s) after intermittent gaps")
            if args.dropout_out:
                with open(args.dropout_out, "w", encoding="utf-8", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["parameter", "estimate", "se"])
                    w.writerows([c, _num(b), _num(s)] for c, b, s in fit.dropout.table())
        else:
            fit = fit_gee(data, args.formula, args.corr, references=refs or None,
                          small_sample=args.small_sample)
        rows = [[_label(c, ds.treatment_name, len(ds.arms)), _num(b), _num(s0), _num(s1)]
                for c, b, s0, s1 in zip(fit.columns, fit.beta, fit.se_model, fit.se_robust)]
        a = fit.alpha_hat
        if a is not None and np.ndim(a) == 0:
            rows.append(["Corr.", _num(a), "", ""])
        header = ["parameter", "estimate", "se_model", "se_empirical"]
        robust = True
    _emit(rows, header, args.out)
    if args.tests:
        sys.stdout.write("\n")
        _emit(_test_rows(fit, ds.arms, robust),
              ["test", "arm", "statistic", "df", "p_value", "estimate", "se"])
    for n in notes:
        print(f"# {n}", file=sys.stderr)
    return status


def cmd_endpoint(args):
    if args.view == "last-observed" and args.strategy == "cc":
        raise UsageError("complete-case analysis is not an option for the last observed outcome")
    ds = _load(args)
    res = endpoint_analysis(ds, args.view, args.strategy)
    rows = []
    if not args.no_mixed:
        data, _ = _prepare(ds, args.strategy)
        fit = fit_glmm(data, GlmmSpec(args.formula, n_points=args.Q))
        L = build_contrasts(fit, "last-occasion")
        w = wald_test(L, fit.beta, fit.cov_beta)
        rows.append([args.strategy.upper(), args.view, "Mixed", _num(w.statistic), w.df,
                     _num(w.p_value, 4)])
    rows.append([args.strategy.upper(), args.view, "Pearson's chi-squared test",
                 _num(res.pearson.statistic), res.pearson.df, _num(res.pearson.p_value, 4)])
    rows.append([args.strategy.upper(), args.view, "Fisher's exact test", "", "",
                 _num(res.fisher_p, 4)])
    _emit(rows, ["method", "view", "model", "statistic", "df", "p_value"], args.out)
    counts = "; ".join(f"arm {a}: {int(res.table[1, k])}/{int(res.table[:, k].sum())}"
                       for k, a in enumerate(res.arms))
    print(f"# successes/total at endpoint: {counts}", file=sys.stderr)
    return 0


def cmd_scan(args):
    try:
        q_list = [int(q) for q in _csv_list(args.Q_list)]
    except ValueError:
        raise UsageError("--Q-list must be comma-separated integers") from None
    if not q_list or any(not 1 <= q <= 100 for q in q_list):
        raise UsageError("--Q-list entries must be in 1..100")
    modes = _csv_list(args.modes)
    opts = _csv_list(args.optimizers)
    if set(modes) - {ADAPTIVE, NONADAPTIVE}:
        raise UsageError(f"--modes must be drawn from {ADAPTIVE},{NONADAPTIVE}")
    if set(opts) - {QUASI_NEWTON, NEWTON_RAPHSON}:
        raise UsageError(f"--optimizers must be drawn from {QUASI_NEWTON},{NEWTON_RAPHSON}")
    ds = _load(args)
    data, _ = _prepare(ds, args.strategy)
    spec = GlmmSpec(args.formula, references=_references(args.reference) or None)
    from .design import build_design
    design = build_design(data, spec.formula, spec.references)
    if args.param == "all":
        params = None
    elif args.param:
        params = [args.param]
        if args.param not in design.columns + ("sigma",):
            raise UsageError(f"unknown parameter {args.param!r}; choose from "
                             f"{', '.join(design.columns + ('sigma',))}")
    else:
        L = build_contrasts(design, "last-occasion")
        params = [design.columns[int(np.flatnonzero(L[0])[-1])]]
    ex = _executor()
    try:
        res = quadrature_scan(design, spec, q_list, modes, opts, params, executor=ex)
    finally:
        if ex:
            ex.shutdown()
    text = res.to_csv()
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    for (m, o, p), ok in sorted(res.stable.items()):
        print(f"# {m}/{o}/{p}: {'stable' if ok else 'not stable'}", file=sys.stderr)
    return 0


def cmd_simulate(args):
    try:
        with open(args.spec, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read simulation spec: {exc}") from None
    try:
        spec = SimSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid simulation spec: {exc}") from None
    if args.replicates < 1:
        raise UsageError("--replicates must be at least 1")
    names = _csv_list(args.estimators)
    known = builtin_estimators()
    bad = [n for n in names if n not in known]
    if bad:
        raise UsageError(f"unknown estimator(s) {bad}; choose from {', '.join(sorted(known))}")
    params = _csv_list(args.params) if args.params else None
    ex = _executor()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = replicate_study(spec, [known[n] for n in names], args.replicates, params,
                                  executor=ex)
    finally:
        if ex:
            ex.shutdown()
    text = res.to_csv()
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return 0


def _data_args(p):
    p.add_argument("--data", required=True, help="long-format CSV")
    p.add_argument("--treatment", default="trt", help="arm column (default trt)")
    p.add_argument("--categorical", help="comma-separated categorical covariates")
    p.add_argument("--continuous", help="comma-separated continuous covariates")


def build_parser():
    p = _Parser(prog="longit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    d = sub.add_parser("describe", help="missingness pattern table")
    _data_args(d)
    d.add_argument("--out")
    d.set_defaults(func=cmd_describe)

    f = sub.add_parser("fit", help="fit GEE, weighted GEE or GLMM")
    _data_args(f)
    f.add_argument("--model", choices=("gee", "wgee", "glmm"), required=True)
    f.add_argument("--strategy", choices=("cc", "locf", "observed"), default="observed")
    f.add_argument("--formula", default=DEFAULT_FORMULA)
    f.add_argument("--corr", choices=("ind", "exch", "ar1", "un"), default="exch")
    f.add_argument("--quadrature", choices=(ADAPTIVE, NONADAPTIVE))
    f.add_argument("--Q", type=int)
    f.add_argument("--optimizer", choices=(QUASI_NEWTON, NEWTON_RAPHSON))
    f.add_argument("--weights", choices=("occasion", "subject"))
    f.add_argument("--dropout-covariates")
    f.add_argument("--dropout-out", help="write the dropout-model table here (wgee)")
    f.add_argument("--reference", action="append", help="NAME=LEVEL reference level")
    f.add_argument("--small-sample", action="store_true", help="N/(N-1) sandwich inflation")
    f.add_argument("--tests", action="store_true", help="append treatment-effect Wald tests")
    f.add_argument("--out")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("endpoint", help="single-occasion treatment comparison")
    _data_args(e)
    e.add_argument("--view", choices=("last-planned", "last-observed"), default="last-planned")
    e.add_argument("--strategy", choices=("cc", "locf"), default="locf")
    e.add_argument("--formula", default=DEFAULT_FORMULA)
    e.add_argument("--Q", type=int, default=20)
    e.add_argument("--no-mixed", action="store_true", help="skip the GLMM row")
    e.add_argument("--out")
    e.set_defaults(func=cmd_endpoint)

    s = sub.add_parser("scan", help="quadrature sensitivity scan")
    _data_args(s)
    s.add_argument("--Q-list", default="2,3,5,10,20,50")
    s.add_argument("--modes", default=f"{NONADAPTIVE},{ADAPTIVE}")
    s.add_argument("--optimizers", default=f"{QUASI_NEWTON},{NEWTON_RAPHSON}")
    s.add_argument("--strategy", choices=("cc", "locf", "observed"), default="observed")
    s.add_argument("--formula", default=DEFAULT_FORMULA)
    s.add_argument("--param", help="parameter to report, or 'all' "
                                   "(default: last-occasion treatment effect)")
    s.add_argument("--reference", action="append")
    s.add_argument("--out")
    s.set_defaults(func=cmd_scan)

    m = sub.add_parser("simulate", help="bias and coverage study")
    m.add_argument("--spec", required=True, help="JSON simulation spec")
    m.add_argument("--replicates", type=int, default=100)
    m.add_argument("--estimators", default="gee-observed,wgee")
    m.add_argument("--params", help="comma-separated parameters to summarize")
    m.add_argument("--out")
    m.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("a subcommand is required: describe, fit, endpoint, scan, simulate")
        return args.func(args)
    except UsageError as exc:
        print(f"longit: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"longit: error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL as exc:
        print(f"longit: numerical failure: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"longit: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
