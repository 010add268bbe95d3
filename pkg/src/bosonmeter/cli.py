"""``estimate`` command-line experiment runner.

Every subcommand writes one CSV row per repetition plus a JSON summary.
Outputs are fully determined by the arguments and ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from . import cvapps, cvsim, observables, quditsim, schemes, shadows
from .clifford import CliffordError, is_odd_prime

FORMAT_VERSION = 1
CSV_FIELDS = ["format_version", "experiment", "scheme", "param", "rep", "estimate", "exact", "bound"]

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3


class ConfigError(Exception):
    pass


class InfeasibleError(Exception):
    pass


def derive_seed(seed: int, *tags) -> int:
    """Stable integer seed for a sub-experiment."""
    words = [seed] + [(int(round(t * 1000)) if isinstance(t, float) else int(t)) % 2 ** 32 for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


class Result:
    def __init__(self, experiment: str, args: argparse.Namespace):
        self.experiment = experiment
        self.args = args
        self.rows: list[dict] = []
        self.summary: list[dict] = []

    def add_report(self, param, report: schemes.EstimationReport, exact: float | None,
                   bound: float | None, scheme: str, **extra) -> None:
        for r, est in enumerate(report.estimates):
            self.rows.append({
                "format_version": FORMAT_VERSION,
                "experiment": self.experiment,
                "scheme": scheme,
                "param": param,
                "rep": r,
                "estimate": float(est),
                "exact": exact,
                "bound": bound,
            })
        entry = {
            "param": param,
            "scheme": scheme,
            "mean": report.mean,
            "std": report.rep_std,
            "shot_variance": report.shot_variance,
            "exact": exact,
            "bound": bound,
            "T": report.T,
            "R": report.R,
        }
        entry.update(extra)
        self.summary.append(entry)

    def summary_dict(self) -> dict:
        args = {k: v for k, v in vars(self.args).items() if k not in ("func",)}
        return {
            "format_version": FORMAT_VERSION,
            "experiment": self.experiment,
            "seed": self.args.seed,
            "args": args,
            "results": self.summary,
        }

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


# --------------------------------------------------------------------------
# argument helpers
# --------------------------------------------------------------------------


def _bound_arg(text: str):
    if text is None or text.lower() == "none":
        return None
    if text.lower() == "auto":
        return "auto"
    try:
        v = float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--B expects none, auto or a number, not {text!r}") from exc
    if v <= 0:
        raise argparse.ArgumentTypeError("--B must be positive")
    return v


def _resolve_bound(B, state: cvsim.GaussianState):
    if B == "auto":
        return cvsim.default_bound(state)
    return B


def _noise(args) -> cvsim.NoiseModel | None:
    if not args.noise_sigma:
        return None
    try:
        return cvsim.NoiseModel(args.noise_sigma, args.noise_bound)
    except cvsim.GaussianError as exc:
        raise ConfigError(str(exc)) from exc


def _px_bound(obs, B):
    return None if B is None else schemes.px_variance_bound(obs, B)


def _cv_run(result: Result, param, state, obs, scheme_kind: str, args, seed: int,
            B=None, noise=None) -> schemes.EstimationReport:
    scheme = schemes.make_scheme(scheme_kind, obs)
    rep = schemes.estimate(obs, scheme, cvsim.gaussian_sampler(state, noise), args.T, args.R,
                           seed=seed, bounds=B)
    exact = cvsim.exact_px_expectation(state, obs)
    var = schemes.exact_variance(obs, scheme, cvsim.GaussianMoments(state))
    result.add_report(param, rep, exact, _px_bound(obs, B), scheme_kind,
                      analytic_variance=var, B=B)
    return rep


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


def _load_hamiltonian(args) -> observables.VibrationalConfig:
    if not args.hamiltonian:
        raise ConfigError("--hamiltonian is required")
    try:
        return observables.VibrationalConfig.load(args.hamiltonian)
    except (OSError, observables.ObservableError) as exc:
        raise ConfigError(str(exc)) from exc


def _qudit_state(args, h: np.ndarray, d: int, n: int) -> quditsim.QuditState:
    if args.state == "ground":
        return quditsim.ground_state(h, d, n)
    if args.state == "ghz":
        return quditsim.ghz_state(n, d)
    if not args.state_file:
        raise ConfigError("--state file needs --state-file")
    try:
        data = json.loads(Path(args.state_file).read_text())
        amps = np.array([complex(re, im) for re, im in data["amplitudes"]])
        return quditsim.QuditState(int(data["d"]), int(data["n"]), amps)
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad state file: {exc}") from exc


def run_qudit(args) -> Result:
    cfg = _load_hamiltonian(args)
    n, d = cfg.n, args.d
    if d < 2:
        raise ConfigError("--d must be at least 2")
    h = observables.build_vibrational_hamiltonian(cfg, d)
    obs = observables.decompose_ggb(h, n, d)
    state = _qudit_state(args, h, d, n)
    exact = quditsim.exact_expectation(state, h)
    res = Result("qudit", args)
    scheme = schemes.make_scheme(args.scheme, obs)
    rep = schemes.estimate(obs, scheme, quditsim.ggb_sampler(state), args.T, args.R,
                           seed=derive_seed(args.seed, d))
    var = schemes.exact_variance(obs, scheme, quditsim.DenseMoments(state))
    res.add_report(d, rep, exact, schemes.ggb_variance_bound(obs), args.scheme,
                   analytic_variance=var, terms=len(obs.terms))
    return res


def run_qudit_cs(args) -> Result:
    cfg = _load_hamiltonian(args)
    n, d = cfg.n, args.d
    if not is_odd_prime(d):
        raise InfeasibleError(f"Clifford shadows need an odd prime d, got {d}")
    h = observables.build_vibrational_hamiltonian(cfg, d)
    state = _qudit_state(args, h, d, n)
    res = Result("qudit-cs", args)
    rep = shadows.shadow_estimate(h, state, args.T, args.R, seed=derive_seed(args.seed, d))
    res.add_report(d, rep, quditsim.exact_expectation(state, h), None, "clifford")
    return res


def run_cv_tmsv(args) -> Result:
    res = Result("cv-tmsv", args)
    obs = cvsim.mean_photon_observable(2)
    for r in args.r:
        state = cvsim.tmsv(r)
        _cv_run(res, r, state, obs, args.scheme, args, derive_seed(args.seed, r),
                _resolve_bound(args.B, state), _noise(args))
    return res


def run_cv_random(args) -> Result:
    res = Result("cv-random", args)
    for K in args.K:
        rng = np.random.default_rng(derive_seed(args.seed, K, 0))
        state = cvsim.random_gaussian(args.n[0], trace_norm=args.trace_norm,
                                      physical=args.physical, rng=rng)
        obs = cvsim.random_px_observable(args.n[0], args.M, K, rng, k=args.k)
        _cv_run(res, K, state, obs, args.scheme, args, derive_seed(args.seed, K, 1),
                _resolve_bound(args.B, state), _noise(args))
    _add_error_fit(res)
    return res


def _add_error_fit(res: Result) -> None:
    ks = np.array([e["param"] for e in res.summary], dtype=float)
    errs = np.array([e["std"] for e in res.summary])
    if len(ks) >= 3 and np.all(errs > 0):
        fit = stats.linregress(ks, np.log(errs))
        res.summary.append({"fit": "log(error) ~ K", "slope": fit.slope,
                            "intercept": fit.intercept, "r2": fit.rvalue ** 2})


def run_cv_squeezed(args) -> Result:
    res = Result("cv-squeezed", args)
    for n in args.n:
        state = cvsim.equal_squeezed(n, args.r[0])
        rng = np.random.default_rng(derive_seed(args.seed, n, 0))
        obs = cvsim.random_px_observable(n, args.M, args.K[0], rng, k=args.k)
        _cv_run(res, n, state, obs, args.scheme, args, derive_seed(args.seed, n, 1),
                _resolve_bound(args.B, state), _noise(args))
    return res


def run_cv_noise(args) -> Result:
    noise = _noise(args) or cvsim.NoiseModel(0.0)
    res = Result("cv-noise", args)
    state = cvsim.tmsv(args.r[0])
    rng = np.random.default_rng(derive_seed(args.seed, 0))
    K = min(args.K[0], 2)
    obs = cvsim.random_px_observable(2, args.M, K, rng, multilinear=True)
    scheme = schemes.make_scheme(args.scheme, obs)
    B = _resolve_bound(args.B, state) or cvsim.default_bound(state)
    chk = cvapps.noisy_variance_check(state, obs, scheme, noise, args.T, args.R,
                                      seed=derive_seed(args.seed, 1), B=B)
    res.add_report(noise.sigma, chk.report, cvsim.exact_px_expectation(state, obs), chk.bound,
                   args.scheme, V_o=chk.V_o, V_e=chk.V_e, exact_noisy_variance=chk.exact_variance)
    return res


def run_cv_separable(args) -> Result:
    res = Result("cv-separable", args)
    n = args.n[0]
    state = cvsim.equal_squeezed(n, args.r[0]) if args.r[0] else cvsim.GaussianState.vacuum(n)
    B = _resolve_bound(args.B, state) or 4.0
    U = observables.Observable.from_terms(observables.PX, n, [
        (tuple((0, 2) if i == m else (0, 0) for i in range(n)), 0.5) for m in range(n)])
    V = observables.Observable.from_terms(observables.PX, n, [
        (tuple((2, 0) if i == m else (0, 0) for i in range(n)), 0.5) for m in range(n)])
    nu, nv = cvapps.box_sup_bound(U, B), cvapps.box_sup_bound(V, B)
    rep = cvapps.separable_estimate(U, V, state, args.T, args.R, norm_U=nu, norm_V=nv, B=B,
                                    seed=derive_seed(args.seed, n))
    exact = cvsim.exact_px_expectation(state, U + V)
    res.add_report(n, rep, exact, rep.variance_bound, "separable", lam=rep.scheme["lambda"], B=B)
    return res


def run_purity(args) -> Result:
    res = Result("purity", args)
    ref = cvsim.GaussianState.vacuum(1)
    for s in args.s:
        state = cvsim.apply_shift_channel(ref, 0.0, s)
        ests = []
        for r in schemes.repetition_rngs(args.R, derive_seed(args.seed, s)):
            ests.append(cvapps.estimate_purity(ref, state, args.T, r).purity)
        ests = np.array(ests)
        rep = schemes.EstimationReport(float(ests.mean()), ests, float("nan"),
                                       float(ests.std(ddof=1)) if args.R > 1 else 0.0,
                                       args.T, args.R, args.seed, {"kind": "purity"})
        res.add_report(s, rep, cvapps.gaussian_purity(state), None, "homodyne-moments")
    return res


def run_shift(args) -> Result:
    res = Result("shift", args)
    ref = cvsim.GaussianState.vacuum(1)
    state = cvsim.apply_shift_channel(ref, args.a0, args.s[0])
    means, variances = [], []
    for r in schemes.repetition_rngs(args.R, args.seed):
        m = cvapps.estimate_shift_moments(state, ref, 0, args.T, r, k_max=args.k_max)
        means.append(m.mean)
        variances.append(m.variance)
    for name, vals, exact in (("mean", means, args.a0), ("variance", variances, args.s[0] ** 2)):
        vals = np.array(vals)
        rep = schemes.EstimationReport(float(vals.mean()), vals, float("nan"),
                                       float(vals.std(ddof=1)) if args.R > 1 else 0.0,
                                       args.T, args.R, args.seed, {"kind": "shift"})
        res.add_report(name, rep, exact, None, "x-homodyne")
    return res


def paired_comparison(ns, instances: int, schemes_: list[str], K: int, M: int, r: float, T: int,
                      R: int, seed: int, k: int = 2, B=None) -> tuple[list[dict], list[dict]]:
    """Run every scheme on identical (state, observable) instances.

    Returns per-repetition rows and per-instance RMS errors.
    """
    rows, errs = [], []
    for n in ns:
        state = cvsim.equal_squeezed(n, r)
        for i in range(instances):
            rng = np.random.default_rng(derive_seed(seed, n, i))
            obs = cvsim.random_px_observable(n, M, K, rng, k=k)
            exact = cvsim.exact_px_expectation(state, obs)
            b = _resolve_bound(B, state)
            for kind in schemes_:
                scheme = schemes.make_scheme(kind, obs)
                rep = schemes.estimate(obs, scheme, cvsim.gaussian_sampler(state), T, R,
                                       seed=derive_seed(seed, n, i, 7), bounds=b)
                for j, est in enumerate(rep.estimates):
                    rows.append({"format_version": FORMAT_VERSION, "experiment": "compare",
                                 "scheme": kind, "param": n, "rep": i * R + j,
                                 "estimate": float(est), "exact": exact, "bound": None})
                errs.append({"scheme": kind, "n": n, "instance": i,
                             "rms_error": float(np.sqrt(np.mean((rep.estimates - exact) ** 2)))})
    return rows, errs


def sign_test(errs: list[dict], better: str, worse: str) -> dict:
    """One-sided sign test that ``better`` has smaller error than ``worse`` on paired instances."""
    a = {(e["n"], e["instance"]): e["rms_error"] for e in errs if e["scheme"] == better}
    b = {(e["n"], e["instance"]): e["rms_error"] for e in errs if e["scheme"] == worse}
    keys = sorted(set(a) & set(b))
    wins = sum(a[k] < b[k] for k in keys)
    ties = sum(a[k] == b[k] for k in keys)
    trials = len(keys) - ties
    p = float(stats.binomtest(wins, trials, 0.5, alternative="greater").pvalue) if trials else 1.0
    return {"better": better, "worse": worse, "pairs": len(keys), "wins": wins, "p_value": p}


def run_compare(args) -> Result:
    res = Result("compare", args)
    if args.inputs:
        return _merge_inputs(args, res)
    rows, errs = paired_comparison(args.n, args.instances, args.schemes, args.K[0], args.M,
                                   args.r[0], args.T, args.R, args.seed, args.k, args.B)
    res.rows = rows
    for kind in args.schemes:
        for n in args.n:
            e = [x["rms_error"] for x in errs if x["scheme"] == kind and x["n"] == n]
            res.summary.append({"scheme": kind, "param": n, "median_error": float(np.median(e))})
    if "ogm" in args.schemes and "l1" in args.schemes:
        res.summary.append({"sign_test": sign_test(errs, "ogm", "l1")})
    res.summary.append({"instances": errs})
    return res


def _merge_inputs(args, res: Result) -> Result:
    seeds = set()
    for path in args.inputs:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        seeds.add(data.get("seed"))
        for entry in data.get("results", []):
            res.summary.append({"source": str(path), "experiment": data.get("experiment"), **entry})
    if len(seeds) > 1:
        raise ConfigError(f"inputs were produced with different seeds: {sorted(map(str, seeds))}")
    return res


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


EXPERIMENTS: dict[str, Callable[[argparse.Namespace], Result]] = {
    "qudit": run_qudit,
    "qudit-cs": run_qudit_cs,
    "cv-tmsv": run_cv_tmsv,
    "cv-random": run_cv_random,
    "cv-squeezed": run_cv_squeezed,
    "cv-noise": run_cv_noise,
    "cv-separable": run_cv_separable,
    "purity": run_purity,
    "shift": run_shift,
    "compare": run_compare,
}

DEFAULTS = {
    "qudit": dict(T=10000, R=10),
    "qudit-cs": dict(T=10000, R=10),
    "cv-tmsv": dict(T=1000, R=100, r=[0.25, 0.5, 1.0, 1.5]),
    "cv-random": dict(T=1000, R=100, n=[10], K=[1, 2, 3, 4, 5], M=100),
    "cv-squeezed": dict(T=1000, R=10, n=[2, 4, 8], K=[2], M=100, r=[0.5]),
    "cv-noise": dict(T=100000, R=1, r=[0.5], K=[2], M=10, noise_sigma=0.1),
    "cv-separable": dict(T=100000, R=10, n=[1], r=[0.0]),
    "purity": dict(T=100000, R=10, s=[0.1, 0.2, 0.3]),
    "shift": dict(T=1000000, R=1, s=[0.0]),
    "compare": dict(T=1000, R=10, n=[2, 4, 8], K=[2], M=50, r=[0.5]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="estimate", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name, func in EXPERIMENTS.items():
        p = sub.add_parser(name)
        p.add_argument("--T", type=int, default=1000, help="samples per repetition")
        p.add_argument("--R", type=int, default=10, help="repetitions")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--scheme", choices=schemes.SCHEME_KINDS, default="cs")
        p.add_argument("--d", type=int, default=3)
        p.add_argument("--n", type=int, nargs="+", default=[2])
        p.add_argument("--K", type=int, nargs="+", default=[2], help="term degree(s)")
        p.add_argument("--k", type=int, default=2, help="maximal term locality")
        p.add_argument("--M", type=int, default=100, help="number of random terms")
        p.add_argument("--r", type=float, nargs="+", default=[1.0], help="squeezing parameter(s)")
        p.add_argument("--s", type=float, nargs="+", default=[0.0], help="shift std(s)")
        p.add_argument("--a0", type=float, default=0.0, help="mean position shift")
        p.add_argument("--k-max", type=int, default=2)
        p.add_argument("--B", type=_bound_arg, default=None, help="projection bound: none, auto or value")
        p.add_argument("--noise-sigma", type=float, default=0.0)
        p.add_argument("--noise-bound", type=float, default=None)
        p.add_argument("--trace-norm", type=float, default=1.0)
        p.add_argument("--physical", action="store_true", help="rescale random states to be physical")
        p.add_argument("--hamiltonian", help="vibrational Hamiltonian JSON")
        p.add_argument("--state", choices=("ground", "ghz", "file"), default="ground")
        p.add_argument("--state-file")
        p.add_argument("--instances", type=int, default=10)
        p.add_argument("--schemes", nargs="+", choices=schemes.SCHEME_KINDS, default=["cs", "l1", "ogm"])
        p.add_argument("--inputs", nargs="+", help="JSON summaries to merge (compare only)")
        p.add_argument("--output", help="CSV path; the JSON summary goes next to it")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.set_defaults(func=func, **DEFAULTS.get(name, {}))
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.T < 1 or args.R < 1:
        parser.error("--T and --R must be positive")
    try:
        result = args.func(args)
    except (ConfigError, observables.ObservableError, cvsim.GaussianError,
            schemes.SchemeError, cvapps.ApplicationError) as exc:
        print(f"estimate: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleError, CliffordError) as exc:
        print(f"estimate: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    summary = json.dumps(result.summary_dict(), indent=2, default=_json_default, sort_keys=True)
    if args.output:
        out = Path(args.output)
        out.write_text(result.csv_text() if args.format == "csv" else summary + "\n")
        if args.format == "csv":
            out.with_suffix(".json").write_text(summary + "\n")
    else:
        sys.stdout.write(result.csv_text() if args.format == "csv" else summary + "\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
