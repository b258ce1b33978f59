"""Monte Carlo harness for the beta-covariate design.

Z ~ Bernoulli(0.5), X | Z ~ beta(a11 + a12 Z, a13 + a14 Z), C | Z ~ beta
with shapes linear in Z, and Y | X, Z normal. The first censoring shape is
calibrated so that P(X > C) hits a target proportion.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import optimize, stats
from scipy.special import betainc

from ._io import atomic_open, format_floats, parse_floats, read_keyvalue, write_keyvalue
from .data import Dataset
from .errors import CalibrationError, DomainError, SparccError
from .estimators import FitOptions, fit
from .nuisance import C_GIVEN_Z, X_GIVEN_Z, BetaDensity, BetaWorkingModel, NoCensoring, canonical_spec
from .outcome import RegressionParams
from .quadrature import DEFAULT_HERMITE_ORDER, DEFAULT_NODES, DEFAULT_SIMPSON_PANELS, simpson_weights

log = logging.getLogger(__name__)

ALPHA1 = (1.5, 1.0, 2.5, -1.0)
BETA_TRUE = (1.0, 10.0, 2.0, 0.0)
CENSORING_SHAPE2 = 2.5
SHAPE_BOUNDS = (1e-3, 1e3)
CALIBRATION_TOL = 1e-4
Z_LEVELS = (0.0, 1.0)
Z_PROB = 0.5
FAILURE_LIMIT = 0.05
Z975 = float(stats.norm.ppf(0.975))

DEFAULT_ESTIMATORS = ("sparcc:correct/correct", "mle:correct", "cc", "oracle")
PROFILES = {"desk": (2000, 200), "full": (8000, 1000)}


@dataclass(frozen=True)
class SimConfig:
    n: int = 2000
    replicates: int = 200
    q_target: float = 0.4
    alpha1: tuple = ALPHA1
    beta_true: RegressionParams = field(default_factory=lambda: RegressionParams(*BETA_TRUE))
    estimators: tuple = DEFAULT_ESTIMATORS
    seed: int = 20240917
    nodes: int = DEFAULT_NODES
    hermite_order: int = DEFAULT_HERMITE_ORDER
    simpson_panels: int = DEFAULT_SIMPSON_PANELS
    censoring_shape2: float = CENSORING_SHAPE2
    censoring_z_slopes: tuple = (0.0, 0.0)
    alpha2: tuple | None = None
    table1_units: bool = False

    def __post_init__(self):
        if self.n < 50:
            raise DomainError(f"n must be at least 50, got {self.n}")
        if self.replicates < 1:
            raise DomainError("replicates must be at least 1")
        if not 0.0 < self.q_target < 1.0:
            raise DomainError(f"q_target must be in (0, 1), got {self.q_target}")
        if len(self.alpha1) != 4:
            raise DomainError("alpha1 needs four entries")
        for label in self.estimators:
            parse_label(label)

    @classmethod
    def profile(cls, name: str, **overrides) -> "SimConfig":
        n, reps = PROFILES[name]
        return cls(n=n, replicates=reps, **overrides)

    def fit_options(self, truth=None) -> FitOptions:
        eta1, eta2 = truth if truth is not None else (None, None)
        return FitOptions(nodes=self.nodes, hermite_order=self.hermite_order,
                          interaction=self.beta_true.beta3 != 0.0, eta1_truth=eta1, eta2_truth=eta2)


# ---------------------------------------------------------------------------
# config files

_CONFIG_KEYS = ("n", "replicates", "q_target", "alpha1", "beta_true", "log_sigma2", "estimators", "seed",
                "nodes", "hermite_order", "simpson_panels", "censoring_shape2", "censoring_z_slopes",
                "alpha2", "table1_units")


def load_config(path) -> SimConfig:
    """Read a flat ``key = value`` file; unknown keys are an error.

    Vectors are comma separated; ``beta_true`` lists beta0, beta1, beta2 and
    optionally beta3, with ``log_sigma2`` separate.
    """
    try:
        kv = read_keyvalue(path)
    except ValueError as exc:
        raise DomainError(str(exc)) from None
    unknown = sorted(set(kv) - set(_CONFIG_KEYS))
    if unknown:
        raise DomainError(f"{path}: unknown config keys {unknown}")
    args: dict = {}
    try:
        for key in ("n", "replicates", "seed", "nodes", "hermite_order", "simpson_panels"):
            if key in kv:
                args[key] = int(kv[key])
        for key in ("q_target", "censoring_shape2"):
            if key in kv:
                args[key] = float(kv[key])
        for key in ("alpha1", "censoring_z_slopes", "alpha2"):
            if key in kv:
                args[key] = tuple(parse_floats(kv[key]))
        if "beta_true" in kv or "log_sigma2" in kv:
            b = parse_floats(kv.get("beta_true", format_floats(BETA_TRUE[:3])))
            if len(b) not in (3, 4):
                raise ValueError("beta_true needs 3 or 4 entries")
            b = b + [0.0] * (4 - len(b))
            args["beta_true"] = RegressionParams(*b, log_sigma2=float(kv.get("log_sigma2", 0.0)))
        if "estimators" in kv:
            args["estimators"] = tuple(s.strip() for s in kv["estimators"].split(",") if s.strip())
        if "table1_units" in kv:
            args["table1_units"] = kv["table1_units"].lower() in ("1", "true", "yes")
    except ValueError as exc:
        raise DomainError(f"{path}: {exc}") from None
    return SimConfig(**args)


def save_config(config: SimConfig, path) -> None:
    b = config.beta_true
    items = {
        "n": config.n, "replicates": config.replicates, "q_target": repr(config.q_target),
        "alpha1": format_floats(config.alpha1),
        "beta_true": format_floats((b.beta0, b.beta1, b.beta2, b.beta3)),
        "log_sigma2": repr(float(b.log_sigma2)),
        "estimators": ",".join(config.estimators), "seed": config.seed, "nodes": config.nodes,
        "hermite_order": config.hermite_order, "simpson_panels": config.simpson_panels,
        "censoring_shape2": repr(config.censoring_shape2),
        "censoring_z_slopes": format_floats(config.censoring_z_slopes),
        "table1_units": int(config.table1_units),
    }
    if config.alpha2 is not None:
        items["alpha2"] = format_floats(config.alpha2)
    write_keyvalue(path, items, header="sparcc simulation config")


def parse_label(label: str) -> tuple[str, str | None, str | None]:
    """``sparcc:eta1/eta2``, ``mle:eta1``, ``cc`` or ``oracle``."""
    head, _, tail = label.partition(":")
    try:
        if head == "sparcc":
            e1, _, e2 = tail.partition("/")
            return "sparcc", canonical_spec(e1), canonical_spec(e2)
        if head == "mle" and "/" not in tail:
            return "mle", canonical_spec(tail), None
        if head in ("cc", "oracle") and not tail:
            return head, None, None
    except ValueError:
        pass
    raise DomainError(f"bad estimator label {label!r}; use sparcc:<x|z>/<c|z>, mle:<x|z>, cc or oracle")


# ---------------------------------------------------------------------------
# data generation and calibration


def _shapes(alpha, z):
    return alpha[0] + alpha[1] * z, alpha[2] + alpha[3] * z


def _check_shapes(alpha, what):
    for z in Z_LEVELS:
        a, b = _shapes(alpha, z)
        if not (a > 0 and b > 0):
            raise DomainError(f"{what} gives non-positive beta shapes ({a}, {b}) at z = {z}")


def true_densities(config: SimConfig, alpha2):
    """Generating laws of X | Z and C | Z as nuisance-density objects."""
    eta1 = BetaDensity(BetaWorkingModel(*config.alpha1), Z_LEVELS, X_GIVEN_Z, "exact", True)
    if alpha2 is None:
        return eta1, NoCensoring(Z_LEVELS)
    return eta1, BetaDensity(BetaWorkingModel(*alpha2), Z_LEVELS, C_GIVEN_Z, "exact", True)


def generate_complete_data(config: SimConfig, alpha2, rng: np.random.Generator) -> Dataset:
    """``n`` records with latent x and c; ``alpha2=None`` means no censoring."""
    _check_shapes(config.alpha1, "alpha1")
    if alpha2 is not None:
        _check_shapes(alpha2, "alpha2")
    n = config.n
    z = (rng.random(n) < Z_PROB).astype(float)
    a1, b1 = _shapes(config.alpha1, z)
    x = rng.beta(a1, b1)
    if alpha2 is None:
        c = np.full(n, np.inf)
    else:
        a2, b2 = _shapes(alpha2, z)
        c = rng.beta(a2, b2)
    b = config.beta_true
    mean = b.beta0 + b.beta1 * x + b.beta2 * z + b.beta3 * x * z
    y = mean + math.exp(0.5 * b.log_sigma2) * rng.standard_normal(n)
    delta = (x <= c).astype(np.int8)
    return Dataset(y=y, w=np.minimum(x, c), delta=delta, z=z, x=x, c=np.minimum(c, 1e300))


def censoring_probability(alpha1, alpha2, panels: int = DEFAULT_SIMPSON_PANELS) -> float:
    """P(X > C) as a Z mixture of Simpson integrals of f_X(x | z) F_C(x | z)."""
    x, w = simpson_weights(0.0, 1.0, panels)
    total = 0.0
    for z in Z_LEVELS:
        a1, b1 = _shapes(alpha1, z)
        a2, b2 = _shapes(alpha2, z)
        with np.errstate(divide="ignore", invalid="ignore"):
            fx = stats.beta.pdf(x, a1, b1)
        fx = np.where(np.isfinite(fx), fx, 0.0)
        total += 0.5 * float(np.dot(w, fx * betainc(a2, b2, x)))
    return total


def calibrate_censoring(alpha1, q_target: float, shape2: float = CENSORING_SHAPE2, z_slopes=(0.0, 0.0),
                        panels: int = DEFAULT_SIMPSON_PANELS) -> tuple:
    """First censoring shape giving P(X > C) = q_target; returns the 4-vector alpha2."""
    if not 0.0 < q_target < 1.0:
        raise DomainError(f"q_target must be in (0, 1), got {q_target}")
    _check_shapes(alpha1, "alpha1")
    sa, sb = map(float, z_slopes)
    lo = max(SHAPE_BOUNDS[0], SHAPE_BOUNDS[0] - sa)
    hi = SHAPE_BOUNDS[1]

    def gap(log_s):
        return censoring_probability(alpha1, (math.exp(log_s), sa, shape2, sb), panels) - q_target

    g_lo, g_hi = gap(math.log(lo)), gap(math.log(hi))
    if g_lo < 0 or g_hi > 0:
        raise CalibrationError(
            f"q = {q_target} is outside the reachable range [{g_hi + q_target:.6g}, {g_lo + q_target:.6g}] "
            f"for shape1 in [{lo:g}, {hi:g}]")
    log_s = optimize.brentq(gap, math.log(lo), math.log(hi), xtol=1e-12, rtol=1e-14)
    if abs(gap(log_s)) >= CALIBRATION_TOL:
        raise CalibrationError(f"calibration stalled with |P(X > C) - q| = {abs(gap(log_s)):.3g}")
    return (math.exp(log_s), sa, float(shape2), sb)


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class ReplicateRow:
    replicate: int
    estimator: str
    parameter: str
    estimate: float
    se: float
    covered: int
    status: str
    censoring_fraction: float


@dataclass(frozen=True)
class SummaryRow:
    estimator: str
    x_given_z: str
    c_given_z: str
    parameter: str
    truth: float
    n_ok: int
    n_fail: int
    bias: float
    ese: float
    ase_mean: float
    ase_median: float
    coverage: float
    ese_defined: bool
    unreliable: bool


@dataclass
class SimResult:
    config: SimConfig
    alpha2: tuple | None
    summary: list
    replicates: list
    mean_censoring: float
    flags: list = field(default_factory=list)

    def row(self, estimator: str, parameter: str = "beta1") -> SummaryRow:
        """Summary row for an estimator label such as ``sparcc:correct/incorrect``."""
        est, e1, e2 = parse_label(estimator)
        key = (est, e1 or "-", e2 or "-", parameter)
        for r in self.summary:
            if (r.estimator, r.x_given_z, r.c_given_z, r.parameter) == key:
                return r
        raise KeyError((estimator, parameter))

    def estimates(self, estimator: str, parameter: str = "beta1") -> np.ndarray:
        """Per-replicate estimates (NaN for failures), ordered by replicate."""
        vals = [r.estimate for r in self.replicates if r.estimator == estimator and r.parameter == parameter]
        return np.array(vals, float)

    def standard_errors(self, estimator: str, parameter: str = "beta1") -> np.ndarray:
        vals = [r.se for r in self.replicates if r.estimator == estimator and r.parameter == parameter]
        return np.array(vals, float)


def _replicate(args):
    config, alpha2, seed_seq, index = args
    rng = np.random.default_rng(seed_seq)
    data = generate_complete_data(config, alpha2, rng)
    truth = true_densities(config, alpha2)
    options = config.fit_options(truth)
    names = config.beta_true.names(options.interaction)
    tv = config.beta_true.to_vector(options.interaction)
    cens = float(data.censoring_fraction)
    rows = []
    for label in config.estimators:
        est, e1, e2 = parse_label(label)
        try:
            res = fit(data, est, e1 or "correct", e2 or "correct", options)
            status = "ok"
            theta, se = res.theta, res.se
        except SparccError as exc:
            log.info("replicate %d %s failed: %s", index, label, exc)
            status = exc.category
            theta = se = np.full(len(names), np.nan)
        for j, name in enumerate(names):
            covered = int(abs(theta[j] - tv[j]) <= Z975 * se[j]) if np.isfinite(se[j]) else 0
            rows.append(ReplicateRow(index, label, name, float(theta[j]), float(se[j]), covered, status, cens))
    return rows, cens


def _aggregate(config: SimConfig, rows: list) -> tuple[list, list]:
    scale = 10.0 if config.table1_units else 1.0
    tv = dict(zip(config.beta_true.names(config.beta_true.beta3 != 0.0),
                  config.beta_true.to_vector(config.beta_true.beta3 != 0.0)))
    summary, flags = [], []
    for label in config.estimators:
        est, e1, e2 = parse_label(label)
        for name, truth in tv.items():
            sel = [r for r in rows if r.estimator == label and r.parameter == name]
            ok = [r for r in sel if r.status == "ok"]
            n_fail = len(sel) - len(ok)
            vals = np.array([r.estimate for r in ok])
            ses = np.array([r.se for r in ok])
            fin = np.isfinite(ses)
            bias = float(np.mean(vals) - truth) if vals.size else math.nan
            ese_defined = vals.size >= 2
            ese = float(np.std(vals, ddof=1)) if ese_defined else math.nan
            ase_mean = float(np.mean(ses[fin])) if fin.any() else math.nan
            ase_median = float(np.median(ses[fin])) if fin.any() else math.nan
            coverage = 100.0 * float(np.mean([r.covered for r in ok])) if ok else math.nan
            unreliable = n_fail > FAILURE_LIMIT * len(sel)
            if unreliable and name == "beta1":
                flags.append(f"{label}: {n_fail} of {len(sel)} replicates failed")
            if not ese_defined and name == "beta1":
                flags.append(f"{label}: ESE undefined with {vals.size} successful replicate(s)")
            summary.append(SummaryRow(est, e1 or "-", e2 or "-", name, float(truth), len(ok), n_fail,
                                      scale * bias, scale * ese, scale * ase_mean, scale * ase_median,
                                      coverage, ese_defined, unreliable))
    return summary, flags


def run_monte_carlo(config: SimConfig, threads: int = 1, progress=None) -> SimResult:
    """Generate, fit and aggregate ``config.replicates`` data sets.

    Replicate ``r`` draws from the ``r``-th child of the master seed
    sequence, so its data do not depend on which estimators run or on the
    worker count.
    """
    alpha2 = config.alpha2
    if alpha2 is None:
        alpha2 = calibrate_censoring(config.alpha1, config.q_target, config.censoring_shape2,
                                     config.censoring_z_slopes, config.simpson_panels)
    seeds = np.random.SeedSequence(config.seed).spawn(config.replicates)
    tasks = [(config, alpha2, s, r) for r, s in enumerate(seeds)]
    rows, cens = [], []
    if threads > 1 and config.replicates > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outputs = pool.map(_replicate, tasks, chunksize=max(1, len(tasks) // (4 * threads)))
            for k, (r, c) in enumerate(outputs):
                rows.extend(r)
                cens.append(c)
                if progress:
                    progress(k + 1, config.replicates)
    else:
        for k, task in enumerate(tasks):
            r, c = _replicate(task)
            rows.extend(r)
            cens.append(c)
            if progress:
                progress(k + 1, config.replicates)
    summary, flags = _aggregate(config, rows)
    return SimResult(config, tuple(alpha2), summary, rows, float(np.mean(cens)), flags)


@dataclass(frozen=True)
class SweepRow:
    q_target: float
    shape1: float
    estimator: str
    n_ok: int
    variance: float
    variance_lo: float
    variance_hi: float
    ese: float
    mean_censoring: float


def variance_interval(values, level: float = 0.95) -> tuple[float, float, float]:
    """Sample variance and its chi-square confidence interval."""
    values = np.asarray(values, float)
    values = values[np.isfinite(values)]
    k = values.size
    if k < 2:
        return math.nan, math.nan, math.nan
    v = float(np.var(values, ddof=1))
    a = 1.0 - level
    lo = (k - 1) * v / stats.chi2.ppf(1 - a / 2, k - 1)
    hi = (k - 1) * v / stats.chi2.ppf(a / 2, k - 1)
    return v, float(lo), float(hi)


def _loo_variances(values: np.ndarray) -> np.ndarray:
    k = values.size
    s1, s2 = values.sum(), (values ** 2).sum()
    loo_mean = (s1 - values) / (k - 1)
    return ((s2 - values ** 2) - (k - 1) * loo_mean ** 2) / (k - 2)


def jackknife_variance_se(values, other=None) -> float:
    """Leave-one-out jackknife standard error of the sample variance.

    With ``other`` given, the statistic is ``var(values) - var(other)``
    over replicates where both are finite, which keeps the pairing of
    estimators fitted to the same data.
    """
    values = np.asarray(values, float)
    if other is None:
        values = values[np.isfinite(values)]
        if values.size < 3:
            return math.nan
        stat = _loo_variances(values)
    else:
        other = np.asarray(other, float)
        keep = np.isfinite(values) & np.isfinite(other)
        if keep.sum() < 3:
            return math.nan
        stat = _loo_variances(values[keep]) - _loo_variances(other[keep])
    k = stat.size
    return float(np.sqrt((k - 1) / k * np.sum((stat - stat.mean()) ** 2)))


def sweep_censoring(config: SimConfig, q_list, threads: int = 1, progress=None) -> list[SweepRow]:
    """Empirical variance of the beta1 estimates across censoring proportions."""
    out = []
    for q in q_list:
        cfg = replace(config, q_target=float(q), alpha2=None)
        res = run_monte_carlo(cfg, threads=threads, progress=progress)
        for label in cfg.estimators:
            vals = res.estimates(label)
            v, lo, hi = variance_interval(vals)
            out.append(SweepRow(float(q), res.alpha2[0], label, int(np.isfinite(vals).sum()), v, lo, hi,
                                math.sqrt(v) if np.isfinite(v) else math.nan, res.mean_censoring))
    return out


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else "nan"
    return str(v)


def _write_rows(path, rows, columns) -> None:
    with atomic_open(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            d = asdict(row)
            writer.writerow([_fmt(d[c]) for c in columns])


SUMMARY_COLUMNS = ("estimator", "x_given_z", "c_given_z", "parameter", "truth", "n_ok", "n_fail", "bias",
                   "ese", "ase_mean", "ase_median", "coverage", "ese_defined", "unreliable")
REPLICATE_COLUMNS = ("replicate", "estimator", "parameter", "estimate", "se", "covered", "status",
                     "censoring_fraction")
SWEEP_COLUMNS = ("q_target", "shape1", "estimator", "n_ok", "variance", "variance_lo", "variance_hi", "ese",
                 "mean_censoring")


def write_summary(result: SimResult, path) -> None:
    _write_rows(path, result.summary, SUMMARY_COLUMNS)


def write_replicates(result: SimResult, path) -> None:
    _write_rows(path, result.replicates, REPLICATE_COLUMNS)


def write_sweep(rows: list, path) -> None:
    _write_rows(path, rows, SWEEP_COLUMNS)


def write_metadata(result: SimResult, path) -> None:
    cfg = result.config
    items = {
        "n": cfg.n, "replicates": cfg.replicates, "seed": cfg.seed, "q_target": repr(cfg.q_target),
        "alpha1": format_floats(cfg.alpha1),
        "alpha2": format_floats(result.alpha2) if result.alpha2 is not None else "none",
        "mean_censoring": repr(result.mean_censoring),
        "units": "x10" if cfg.table1_units else "raw",
        "flags": "; ".join(result.flags) or "none",
    }
    write_keyvalue(path, items, header="sparcc simulation run")


def write_outputs(result: SimResult, outdir) -> dict:
    outdir = Path(outdir)
    paths = {"summary": outdir / "results_summary.csv", "replicates": outdir / "results_replicates.csv",
             "metadata": outdir / "run_metadata.txt"}
    write_summary(result, paths["summary"])
    write_replicates(result, paths["replicates"])
    write_metadata(result, paths["metadata"])
    return paths
