"""Command-line orchestration: one JSON config per experiment.

Exit codes: 0 success, 1 issues reported by ``verify``, 2 invalid config,
3 violated mathematical precondition, 4 I/O failure.

All randomness derives from one 64-bit seed (``--seed`` or the config's
``seed``, default 0): path simulation uses ``derive_seed(seed, "paths")`` and
environment sampling ``derive_seed(seed, "env")``, each then keyed by block
or environment index.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .decomposition import (
    Observable,
    decompose,
    decomposition_rows,
    exact_variance,
    telescoping_observable,
    variance_classification,
)
from .errors import ConfigInvalid, DoeblinError, Inconclusive, InsufficientPoints, AllPointsBelowNoise, IoFailure
from .kernel import (
    StochasticKernel,
    dobrushin_coefficient,
    doeblin_extract,
    minimal_doeblin_lag,
    read_kernel_csv,
    stationary_distribution,
    validate_kernel,
)
from .montecarlo import DISTANCE_COLUMNS, SimulationPlan, distance_row, fit_rate, simulate
from .random_env import (
    EnvironmentModel,
    GoodSetSpec,
    RandomKernelAssignment,
    RateRegime,
    ensemble_reports,
    equivariance_residuals,
    forward_tv,
    fit_exponential_decay,
    mixing_tail_check,
    mixing_times,
    rate_constant,
    sample_ensemble,
    skew_correlation,
)
from .rng import derive_seed
from .sequential import ChainSpec, ledger_rows

KINDS = ("analyze-kernel", "ledger", "decompose", "clt-rate", "random-env", "mixing-times", "skew-corr")

# ---------------------------------------------------------------- schema

_MATRIX = {"type": "array", "minItems": 1, "items": {"type": "array", "minItems": 1, "items": {"type": "number"}}}
_KERNEL = {
    "oneOf": [
        _MATRIX,
        {"type": "object", "properties": {"file": {"type": "string"}}, "required": ["file"], "additionalProperties": False},
    ]
}
_VECTOR = {"type": "array", "minItems": 1, "items": {"type": "number"}}
_POS_INT = {"type": "integer", "minimum": 1}
_PROB = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_CHAIN = {
    "type": "object",
    "properties": {
        "kernels": {"type": "array", "minItems": 1, "items": _KERNEL},
        "mode": {"enum": ["finite", "periodic", "constant"]},
        "initial_law": _VECTOR,
    },
    "required": ["kernels"],
    "additionalProperties": False,
}
_OBSERVABLE = {
    "oneOf": [
        _VECTOR,
        {"type": "array", "minItems": 1, "items": _VECTOR},
        {"type": "object", "properties": {"telescoping": _VECTOR}, "required": ["telescoping"], "additionalProperties": False},
    ]
}
_ENVIRONMENT = {
    "type": "object",
    "properties": {
        "alphabet": {"type": "array", "minItems": 1, "items": {"type": "string"}, "uniqueItems": True},
        "base": {"enum": ["iid", "markov"]},
        "probs": _VECTOR,
        "kernel": _MATRIX,
    },
    "required": ["alphabet", "base"],
    "additionalProperties": False,
}
_ASSIGNMENT = {
    "type": "object",
    "properties": {
        "kernels": {"type": "object", "minProperties": 1, "additionalProperties": _KERNEL},
        "observables": {"type": "object", "additionalProperties": _VECTOR},
    },
    "required": ["kernels"],
    "additionalProperties": False,
}
_GOOD_SET = {
    "type": "object",
    "properties": {
        "symbols": {"type": "array", "items": {"type": "string"}},
        "certified": {"type": "boolean"},
        "delta": _PROB,
        "M": _POS_INT,
    },
    "required": ["delta"],
    "additionalProperties": False,
}
_REGIME = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["polynomial", "stretched"]},
        "exponent": {"type": "number", "exclusiveMinimum": 0},
        "scale": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["kind", "exponent"],
    "additionalProperties": False,
}
_COMMON = {"kind": {"enum": list(KINDS)}, "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
           "output": {"type": "string"}}
_ENV_COMMON = {
    "environment": _ENVIRONMENT,
    "assignment": _ASSIGNMENT,
    "ensemble": _POS_INT,
    "horizon": _POS_INT,
    "past_depth": _POS_INT,
    "tolerance": _PROB,
}


def _schema(required, **props):
    return {
        "type": "object",
        "properties": dict(_COMMON, **props),
        "required": list(required),
        "additionalProperties": False,
    }


SCHEMAS = {
    "analyze-kernel": _schema(["kernel"], kernel=_KERNEL, threshold=_PROB, cap=_POS_INT),
    "ledger": _schema(
        ["chain", "lengths"], chain=_CHAIN, target={"type": "integer"},
        lengths={"type": "array", "minItems": 1, "items": _POS_INT}, tolerance=_PROB,
    ),
    "decompose": _schema(
        ["chain", "observable", "horizon"], chain=_CHAIN, observable=_OBSERVABLE, horizon=_POS_INT,
        truncation=_POS_INT, variance_horizon=_POS_INT,
    ),
    "clt-rate": _schema(
        ["chain", "observable", "horizons", "paths"], chain=_CHAIN, observable=_OBSERVABLE,
        horizons={"type": "array", "minItems": 1, "items": _POS_INT}, paths=_POS_INT,
        s={"type": "number", "minimum": 0}, q={"type": "number", "minimum": 1},
    ),
    "random-env": _schema(
        ["environment", "assignment", "good_set", "ensemble", "horizon"], good_set=_GOOD_SET, regime=_REGIME,
        export={"type": "integer", "minimum": 0}, **_ENV_COMMON,
    ),
    "mixing-times": _schema(
        ["environment", "assignment", "ensemble", "horizon", "epsilons", "p", "regime"],
        epsilons={"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
        p={"type": "number", "exclusiveMinimum": 0}, regime=_REGIME, **_ENV_COMMON,
    ),
    "skew-corr": _schema(
        ["environment", "assignment", "ensemble", "f", "g", "lags"],
        f={"oneOf": [_VECTOR, {"type": "object", "additionalProperties": _VECTOR}]},
        g={"oneOf": [_VECTOR, {"type": "object", "additionalProperties": _VECTOR}]},
        lags={"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}}, **_ENV_COMMON,
    ),
}


def load_config(path, kind=None) -> dict:
    """Read and schema-check a config; `kind` (the subcommand) must agree with the file."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise IoFailure(path, exc.strerror or str(exc)) from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(path, f"not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigInvalid(path, "top level must be an object")
    declared = cfg.get("kind")
    if kind is None:
        if declared is None:
            raise ConfigInvalid(path, "'kind' is a required property")
        kind = declared
    elif declared is not None and declared != kind:
        raise ConfigInvalid(path, f"kind: config declares {declared!r} but subcommand is {kind!r}")
    if kind not in SCHEMAS:
        raise ConfigInvalid(path, f"kind: {kind!r} is not one of {list(KINDS)}")
    validator = jsonschema.Draft202012Validator(SCHEMAS[kind])
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "(root)"
            msgs.append(f"{where}: {e.message}")
        raise ConfigInvalid(path, "; ".join(msgs))
    cfg = dict(cfg)
    cfg["kind"] = kind
    cfg["_dir"] = str(Path(path).resolve().parent)
    cfg["_path"] = str(path)
    return cfg


# ---------------------------------------------------------------- config -> objects


def _kernel(spec, base_dir) -> StochasticKernel:
    if isinstance(spec, dict):
        p = Path(spec["file"])
        p = p if p.is_absolute() else Path(base_dir) / p
        try:
            return read_kernel_csv(p)
        except OSError as exc:
            raise IoFailure(str(p), exc.strerror or str(exc)) from None
    return validate_kernel(spec)


def _chain(cfg) -> ChainSpec:
    c = cfg["chain"]
    ks = tuple(_kernel(k, cfg["_dir"]) for k in c["kernels"])
    mode = c.get("mode", "constant" if len(ks) == 1 else "periodic")
    law = c.get("initial_law")
    if law is None:
        law = np.full(ks[0].n_source, 1.0 / ks[0].n_source)
    return ChainSpec(ks, law, mode=mode)


def _observable(cfg, chain):
    """``(chain, observable, is_telescoping)``; a telescoping spec lifts the chain to pairs."""
    o = cfg["observable"]
    if isinstance(o, dict):
        pair, f = telescoping_observable(chain, o["telescoping"])
        return pair, f, True
    if isinstance(o[0], list):
        return chain, Observable(tuple(o), mode=chain.mode), False
    return chain, Observable.constant(o), False


def _env_model(cfg) -> EnvironmentModel:
    e = cfg["environment"]
    return EnvironmentModel(tuple(e["alphabet"]), e["base"], e.get("probs"), e.get("kernel"))


def _assignment(cfg) -> RandomKernelAssignment:
    a = cfg["assignment"]
    alphabet = tuple(cfg["environment"]["alphabet"])
    missing = [s for s in alphabet if s not in a["kernels"]]
    if missing:
        raise ConfigInvalid(cfg.get("_path", "config"), f"assignment/kernels: no kernel for symbols {missing}")
    ks = tuple(_kernel(a["kernels"][s], cfg["_dir"]) for s in alphabet)
    obs = None
    if "observables" in a:
        obs = tuple(a["observables"][s] for s in alphabet)
    return RandomKernelAssignment(alphabet, ks, obs)


def _good_set(cfg, assignment) -> GoodSetSpec:
    g = cfg["good_set"]
    M = g.get("M", 1)
    if g.get("certified", False) or "symbols" not in g:
        return GoodSetSpec.certified(assignment, g["delta"], M)
    return GoodSetSpec.from_symbols(assignment, g["symbols"], g["delta"], M)


def _regime(spec) -> RateRegime:
    return RateRegime(spec["kind"], spec["exponent"], spec.get("scale", 1.0))


def _per_symbol(spec, alphabet):
    if isinstance(spec, dict):
        return np.array([spec[s] for s in alphabet], dtype=float)
    return np.asarray(spec, dtype=float)


# ---------------------------------------------------------------- writers


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return v


class Output:
    """Collects payloads in memory; :meth:`commit` writes them plus a manifest."""

    def __init__(self):
        self.files = {}

    def csv(self, name, comments, header, rows):
        buf = io.StringIO()
        for c in comments:
            buf.write(f"# {c}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        self.files[name] = buf.getvalue().encode()

    def json(self, name, payload):
        self.files[name] = (json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n").encode()

    def commit(self, out_dir, cfg, seed):
        out = Path(out_dir)
        clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
        canon = json.dumps(clean, sort_keys=True, separators=(",", ":")).encode()
        manifest = {
            "tool": "artifact",
            "version": __version__,
            "kind": cfg["kind"],
            "seed": seed,
            "config_sha256": hashlib.sha256(canon).hexdigest(),
            "files": {n: hashlib.sha256(b).hexdigest() for n, b in sorted(self.files.items())},
        }
        try:
            out.mkdir(parents=True, exist_ok=True)
            for name, payload in sorted(self.files.items()):
                (out / name).write_bytes(payload)
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise IoFailure(str(out), exc.strerror or str(exc)) from None
        return manifest


# ---------------------------------------------------------------- experiments


def run_analyze_kernel(cfg, seed, threads, out: Output):
    k = _kernel(cfg["kernel"], cfg["_dir"])
    cert = doeblin_extract(k)
    payload = {
        "states": k.n_source,
        "gamma": cert.gamma,
        "minorizer": cert.minorizer if cert.minorizer is not None else None,
        "residual": cert.residual.matrix,
        "dobrushin": dobrushin_coefficient(k) if k.is_square else None,
        "stationary": stationary_distribution(k) if k.is_square else None,
    }
    if "threshold" in cfg:
        lag, lc = minimal_doeblin_lag(k, cfg["threshold"], cfg.get("cap", 64))
        payload["minimal_lag"] = {"threshold": cfg["threshold"], "lag": lag, "gamma": lc.gamma}
    out.json("kernel.json", payload)


def run_ledger(cfg, seed, threads, out: Output):
    chain = _chain(cfg)
    target = cfg.get("target", chain.period if chain.mode == "finite" else 0)
    rows, mu, err = ledger_rows(chain, target, cfg["lengths"], cfg.get("tolerance", 1e-12))
    out.csv(
        "ledger.csv",
        [
            f"window contraction toward the limit law at target index j={target}",
            "bound: product of (1 - gamma_k) over the n kernels before j (dimensionless)",
            "certified_error: exact sup_x TV(P_{j-n,n}(x,.), mu_j), total variation in [0,1]",
        ],
        ["j", "n", "bound", "certified_error"],
        rows,
    )
    out.json("limit.json", {"target": target, "mu": mu, "certified_error": err})


def run_decompose(cfg, seed, threads, out: Output):
    chain, f, _ = _observable(cfg, _chain(cfg))
    dec = decompose(chain, f, cfg["horizon"], cfg.get("truncation"))
    h_rows, m_rows = decomposition_rows(dec)
    out.csv("h.csv", ["h_j(x): centered forward sum of conditional means, units of f"], ["j", "state", "h"], h_rows)
    out.csv("martingale.csv", ["M_j(x, y) = f~_j(y) + h_j(y) - h_{j-1}(x), units of f"], ["j", "x", "y", "M"], m_rows)
    vh = cfg.get("variance_horizon", 400)
    summary = {"truncation": dec.truncation, "truncation_tail": dec.truncation_tail, "variance_horizon": vh}
    try:
        rep = variance_classification(chain, f, vh)
        summary.update(classification=rep.classification, asymptotic_slope=rep.asymptotic_slope)
    except Inconclusive as exc:
        rep = exact_variance(chain, f, vh)
        summary.update(classification="inconclusive", asymptotic_slope=rep.asymptotic_slope, note=str(exc))
    n = np.arange(len(rep.sigma_sq))
    out.csv(
        "variance.csv",
        ["var: exact Var(S_n) in squared units of f", "var_over_n: Var(S_n)/n (0 at n=0)"],
        ["n", "var", "var_over_n"],
        [(int(i), float(v), float(v / i) if i else 0.0) for i, v in zip(n, rep.sigma_sq)],
    )
    out.json("summary.json", summary)


def run_clt_rate(cfg, seed, threads, out: Output):
    chain, f, _ = _observable(cfg, _chain(cfg))
    plan = SimulationPlan(chain, f, tuple(cfg["horizons"]), cfg["paths"], derive_seed(seed, "paths"))
    cdfs = simulate(plan, threads)
    s, q = cfg.get("s", 2.0), cfg.get("q", 2.0)
    rows = [distance_row(cdfs[n], s, q) for n in plan.horizons]
    out.csv(
        "distances.csv",
        [
            "distances between the law of (S_n - E S_n)/sigma_n and N(0,1)",
            "sigma_n: exact standard deviation of S_n; N: number of paths",
            f"weighted_s: sup_t (1+|t|^s)|F_N - Phi| with s={s!r}; lq: L^q CDF distance with q={q!r}",
            "w1, w2: Wasserstein distances of order 1 and 2 (units of the standardized sum)",
        ],
        DISTANCE_COLUMNS,
        rows,
    )
    fits = []
    for col in ("kolmogorov", "w1", "w2"):
        i = DISTANCE_COLUMNS.index(col)
        try:
            est = fit_rate([(r[1], r[i]) for r in rows], plan.paths)
            fits.append((col, est.fitted_slope, est.intercept, est.slope_stderr, len(rows) - len(est.excluded),
                         est.noise_floor, ""))
        except (InsufficientPoints, AllPointsBelowNoise) as exc:
            fits.append((col, math.nan, math.nan, math.nan, 0, 0.0, str(exc)))
    out.csv(
        "rate_fit.csv",
        ["least squares of log distance on log sigma_n; points below 3x the noise floor excluded"],
        ["statistic", "slope", "intercept", "slope_stderr", "points_used", "noise_floor", "note"],
        fits,
    )


def _ensemble(cfg, seed):
    model = _env_model(cfg)
    asg = _assignment(cfg)
    return model, asg, derive_seed(seed, "env")


def run_random_env(cfg, seed, threads, out: Output):
    model, asg, env_seed = _ensemble(cfg, seed)
    good = _good_set(cfg, asg)
    E, H = cfg["ensemble"], cfg["horizon"]
    depth, tol = cfg.get("past_depth", 1024), cfg.get("tolerance", 1e-14)
    codes, tv, counts, bounds, err, mu0 = ensemble_reports(model, asg, good, E, H, env_seed, depth, tol)
    first = -depth
    resid, resid_err = equivariance_residuals(codes, first, asg, tol)
    excess = (tv - bounds).max(axis=1)
    regime = _regime(cfg.get("regime", {"kind": "stretched", "exponent": 0.5}))
    K = rate_constant(tv, regime, bound_at_horizon=bounds[:, -1])
    export = min(cfg.get("export", 8), E)
    rows = [(w, n, int(counts[w, n]), float(bounds[w, n]), float(tv[w, n])) for w in range(export) for n in range(H + 1)]
    out.csv(
        "reports.csv",
        [
            "quenched contraction per environment index omega_id",
            "hit_count: visits of theta^{jM} omega to the good set, j=1..[n/M]-1",
            f"bound: (1-delta)^hit_count with delta={good.delta!r}; tv_actual: exact sup_x TV to mu at time n",
        ],
        ["omega_id", "n", "hit_count", "bound", "tv_actual"],
        rows,
    )
    out.csv(
        "ensemble.csv",
        ["per environment: worst tv_actual - bound, certified error of mu_omega, equivariance residual (TV)",
         f"K: sup_n tv_actual(n)/a_n for regime {regime.kind} exponent {regime.exponent!r}; inf if not certified"],
        ["omega_id", "hits_at_horizon", "max_excess", *[f"mu_{x}" for x in range(asg.states)], "mu_error",
         "equivariance_residual", "K"],
        [(w, int(counts[w, -1]), float(excess[w]), *map(float, mu0[w]), float(err[w]), float(resid[w]), float(K[w]))
         for w in range(E)],
    )
    finite = K[np.isfinite(K)]
    out.json("summary.json", {
        "environments": E,
        "horizon": H,
        "sound": bool(np.all(excess <= 1e-12)),
        "max_excess": float(excess.max()),
        "max_mu_error": float(err.max()),
        "equivariance_ok": bool(np.all(resid <= resid_err + 1e-15)),
        "K_uncertified": int(E - finite.size),
        "K_quantiles": {str(q): float(np.quantile(finite, q)) for q in (0.5, 0.9, 0.99)} if finite.size else {},
    })


def run_mixing_times(cfg, seed, threads, out: Output):
    model, asg, env_seed = _ensemble(cfg, seed)
    E, H = cfg["ensemble"], cfg["horizon"]
    depth, tol = cfg.get("past_depth", 1024), cfg.get("tolerance", 1e-14)
    codes, first = sample_ensemble(model, E, H, depth, env_seed)
    tv, _, _ = forward_tv(codes, first, asg, H, tol)
    regime = _regime(cfg["regime"])
    p = cfg["p"]
    times, tails, summary = [], [], {"p": p, "regime": cfg["regime"], "environments": E, "horizon": H}
    for eps in cfg["epsilons"]:
        t = mixing_times(tv, eps)
        times.extend((w, eps, int(t[w])) for w in range(E))
        rows, K = mixing_tail_check(tv, eps, p, regime, range(1, H + 1))
        tails.extend((eps, r.N, r.empirical, r.stderr, r.bound) for r in rows)
        summary[f"eps={eps!r}"] = {
            "tail_dominated": all(r.empirical <= r.bound + 3 * r.stderr for r in rows),
            "not_crossed": int(np.count_nonzero(t < 0)),
            "K_p_moment": float(np.mean(K ** p)),
        }
    out.csv("mixing.csv", ["N_eps: first n >= 1 with 2 sup_x TV <= eps (-1: not crossed by the horizon)"],
            ["omega_id", "eps", "N_eps"], times)
    out.csv("tail.csv", ["empirical P(N_eps > N) with binomial standard error",
                         "bound: E[K^p] eps^-p a_N^p with K estimated from the same ensemble"],
            ["eps", "N", "empirical", "stderr", "bound"], tails)
    out.json("summary.json", summary)


def run_skew_corr(cfg, seed, threads, out: Output):
    model, asg, env_seed = _ensemble(cfg, seed)
    lags = sorted(set(cfg["lags"]))
    depth, tol = cfg.get("past_depth", 1024), cfg.get("tolerance", 1e-14)
    codes, first = sample_ensemble(model, cfg["ensemble"], lags[-1] + 1, depth, env_seed)
    f = _per_symbol(cfg["f"], asg.alphabet)
    g = _per_symbol(cfg["g"], asg.alphabet)
    corr, _ = skew_correlation(codes, first, asg, f, g, lags, tol)
    out.csv("correlation.csv", ["correlation of f at time 0 and g at time n under the skew-product measure",
                                "inner expectations exact per environment; outer average over the ensemble"],
            ["lag", "correlation"], list(zip(lags, corr.tolist())))
    summary = {"lags": len(lags), "environments": cfg["ensemble"]}
    try:
        pos = [(l, c) for l, c in zip(lags, corr) if l > 0]
        rate, se = fit_exponential_decay([l for l, _ in pos], [c for _, c in pos], floor=1e-15)
        summary.update(decay_rate=rate, decay_rate_stderr=se)
    except InsufficientPoints as exc:
        summary.update(decay_rate="nan", note=str(exc))
    if model.base == "iid":
        summary["reference_rate"] = -math.log(float(np.dot(model.probs, 1 - asg.gammas)))
    out.json("summary.json", summary)


RUNNERS = {
    "analyze-kernel": run_analyze_kernel,
    "ledger": run_ledger,
    "decompose": run_decompose,
    "clt-rate": run_clt_rate,
    "random-env": run_random_env,
    "mixing-times": run_mixing_times,
    "skew-corr": run_skew_corr,
}


def run(cfg, out_dir, seed=None, threads=1):
    """Execute a loaded config and write its artifacts; returns the manifest."""
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    out = Output()
    RUNNERS[cfg["kind"]](cfg, seed, threads, out)
    return out.commit(out_dir, dict(cfg, seed=seed), seed)


# ---------------------------------------------------------------- verify


def _kernel_issue(label, spec, base_dir):
    try:
        return _kernel(spec, base_dir), None
    except DoeblinError as exc:
        return None, f"{label}: {exc}"


def verify(cfg) -> dict:
    """Cheap structural checks; returns ``{"issues": [...], "warnings": [...]}``."""
    issues, warnings = [], []
    kind = cfg["kind"]
    d = cfg["_dir"]
    try:
        if kind == "analyze-kernel":
            k, msg = _kernel_issue("kernel", cfg["kernel"], d)
            if msg:
                issues.append(msg)
            elif doeblin_extract(k).gamma == 0.0:
                warnings.append("kernel: no one-step minorization (gamma = 0)")
        elif "chain" in cfg:
            ks = []
            for i, spec in enumerate(cfg["chain"]["kernels"]):
                k, msg = _kernel_issue(f"chain/kernels/{i}", spec, d)
                if msg:
                    issues.append(msg)
                ks.append(k)
            for i in range(len(ks) - 1):
                a, b = ks[i], ks[i + 1]
                if a is not None and b is not None and a.n_target != b.n_source:
                    issues.append(f"chain/kernels/{i + 1}: has {b.n_source} source states, "
                                  f"kernel {i} has {a.n_target} target states")
            mode = cfg["chain"].get("mode", "constant" if len(ks) == 1 else "periodic")
            if mode != "finite" and ks[0] is not None and ks[-1] is not None and ks[-1].n_target != ks[0].n_source:
                issues.append(f"chain/kernels/{len(ks) - 1}: {ks[-1].n_target} target states cannot wrap "
                              f"to kernel 0 with {ks[0].n_source} source states")
            law = cfg["chain"].get("initial_law")
            if law is not None and ks[0] is not None and len(law) != ks[0].n_source:
                issues.append(f"chain/initial_law: length {len(law)} but kernel 0 has {ks[0].n_source} states")
            if not issues and all(doeblin_extract(k).gamma == 0.0 for k in ks):
                warnings.append("chain: no kernel has a one-step minorization; contraction may need lags")
            if not issues and "observable" in cfg:
                obs = cfg["observable"]
                vecs = [obs["telescoping"]] if isinstance(obs, dict) else (obs if isinstance(obs[0], list) else [obs])
                for i, v in enumerate(vecs):
                    want = ks[i % len(ks)].n_source
                    if len(v) != want:
                        issues.append(f"observable/{i}: length {len(v)} but the chain has {want} states there")
                if not issues:
                    chain, f, tele = _observable(cfg, _chain(cfg))
                    if kind == "clt-rate":
                        if tele:
                            warnings.append("observable: telescoping coboundary, variance may degenerate")
                        else:
                            try:
                                rep = variance_classification(chain, f, 200)
                                if rep.classification == "bounded":
                                    warnings.append("observable: variance stays bounded (coboundary), "
                                                    "variance may degenerate")
                            except Inconclusive:
                                warnings.append("observable: variance growth inconclusive at n=200")
                            if exact_variance(chain, f, 1).sigma_sq[1] <= 1e-24:
                                warnings.append("observable: Var(S_1) = 0")
        if "environment" in cfg:
            try:
                model = _env_model(cfg)
                asg = _assignment(cfg)
            except (DoeblinError, ValueError) as exc:
                issues.append(f"environment/assignment: {exc}")
            else:
                if not np.any(asg.gammas > 0):
                    issues.append("assignment: no symbol kernel has a one-step minorization")
                if "good_set" in cfg:
                    try:
                        _good_set(cfg, asg)
                    except ValueError as exc:
                        issues.append(f"good_set: {exc}")
                for key in ("f", "g"):
                    if key in cfg:
                        v = _per_symbol(cfg[key], asg.alphabet)
                        if v.shape[-1] != asg.states:
                            issues.append(f"{key}: length {v.shape[-1]} but the state space has {asg.states} states")
                if model.base == "iid" and float(np.dot(model.probs, asg.gammas)) == 0.0:
                    issues.append("environment: good symbols have probability zero")
    except ConfigInvalid as exc:
        issues.append(exc.message)
    except KeyError as exc:
        issues.append(f"missing symbol {exc}")
    return {"kind": kind, "issues": issues, "warnings": warnings}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="doeblin", description="Doeblin minorization experiments from JSON configs.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in (*KINDS, "verify"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output directory (default: config 'output' or ./out)")
        p.add_argument("--seed", type=int, help="top-level unsigned 64-bit seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads for path simulation")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 1 << 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return 2
    try:
        if args.command == "verify":
            cfg = load_config(args.config)
            report = verify(cfg)
            print(json.dumps(report, indent=2, sort_keys=True))
            return 1 if report["issues"] else 0
        cfg = load_config(args.config, args.command)
        out_dir = args.out or cfg.get("output") or os.path.join(os.getcwd(), "out")
        manifest = run(cfg, out_dir, args.seed, args.threads)
        print(json.dumps({"out": str(out_dir), "files": sorted(manifest["files"])}, sort_keys=True))
        return 0
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DoeblinError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except IoFailure as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
