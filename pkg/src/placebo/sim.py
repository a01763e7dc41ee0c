"""Monte-Carlo study: the eight-scenario factorial and Table-1-style summaries."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from placebo.data import Dataset
from placebo.design import DesignSpec
from placebo.estimators import MultiEstimator, Recipe
from placebo.inference import BootstrapUnstable, replicate, summarize_replicates
from placebo.rng import derive_seed, stream

THETA0 = 1.0
COVARIATES = ("X1", "X2", "X3")

SCENARIOS = {
    "I": ("d1", "e1", "f1"),
    "II": ("d2", "e1", "f1"),
    "III": ("d1", "e1", "f2"),
    "IV": ("d1", "e2", "f1"),
    "V": ("d1", "e2", "f2"),
    "VI": ("d2", "e1", "f2"),
    "VII": ("d2", "e2", "f1"),
    "VIII": ("d2", "e2", "f2"),
}


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 1000
    factor_d: str = "d1"
    factor_e: str = "e1"
    factor_f: str = "f1"
    seed: int = 0

    def __post_init__(self):
        if self.n < 50:
            raise ValueError("simulation needs n >= 50")
        if self.factor_d not in ("d1", "d2") or self.factor_e not in ("e1", "e2") \
                or self.factor_f not in ("f1", "f2"):
            raise ValueError("unknown factor level")

    @classmethod
    def scenario(cls, name: str, n: int = 1000, seed: int = 0) -> "ScenarioConfig":
        d, e, f = SCENARIOS[name]
        return cls(n, d, e, f, seed)


@dataclass(frozen=True)
class Latent:
    u: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    theta0: float = THETA0


def _expit(v):
    return 1.0 / (1.0 + np.exp(-v))


def generate(config: ScenarioConfig) -> tuple[Dataset, Latent]:
    """Draw one dataset; U and the potential outcomes are returned separately."""
    rng = stream(config.seed, "generate")
    n = config.n
    x = rng.standard_normal((n, 3))
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    s = (rng.random(n) < _expit(-x1 - x2 + 3 * x3 - x2 * x3)).astype(np.float64)
    a = (rng.random(n) < _expit(-x1 - x2 + x3 + x2 * x3 + 0.2 * s + 0.5)).astype(np.float64)
    if config.factor_d == "d1":
        pu = 0.6 * a + 0.2
    else:
        sign = np.where(x1 + x2 >= 0, 1.0, -1.0)
        pu = 0.6 * a + 0.2 * sign + 0.2
    u = (rng.random(n) < pu).astype(np.float64)
    if config.factor_e == "e1":
        mean0 = -x1 - x2 + 0.5 * x3 + 0.5 * x2 * x3 + 2 * u + 2
    else:
        mean0 = -x1 - x2 - (x3 + 0.5 * x2 * x3) * s + 2 * u + 2
    y0 = mean0 + rng.standard_normal(n)
    if config.factor_f == "f1":
        effect = np.ones(n)
    else:
        effect = 1.0 + math.sqrt(0.5) * rng.standard_normal(n)
    y1 = np.where(s == 1, y0 + effect, y0)
    y = a * y1 + (1 - a) * y0
    return Dataset(y, a, s, x, COVARIATES), Latent(u, y0, y1)


# --------------------------------------------------------------------------- estimator grid

MU_CORRECT = DesignSpec.parse("1 + X1 + X2 + X3 + X2:X3 + S + A + S:A + S:X3 + S:X2:X3")
PI_S_CORRECT = DesignSpec.parse("1 + X1 + X2 + X3 + X2:X3", "logit")
PI_A_CORRECT = DesignSpec.parse("1 + X1 + X2 + X3 + X2:X3 + S", "logit")
MU_NAIVE = DesignSpec.parse("1 + X1 + X2 + X3 + X2:X3 + A")
PI_A_NAIVE = DesignSpec.parse("1 + X1 + X2 + X3 + X2:X3", "logit")


def misspecified(spec: DesignSpec) -> DesignSpec:
    """Drop every term involving the X2*X3 interaction."""
    return spec.without("X2", "X3")


# The S-specific covariate block S:X3 + S:X2:X3 enters as one interaction built on
# X2*X3, so the misspecified outcome model loses it together with X2:X3.
MU_WRONG = DesignSpec.parse("1 + X1 + X2 + X3 + S + A + S:A")
PI_S_WRONG = misspecified(PI_S_CORRECT)
PI_A_WRONG = misspecified(PI_A_CORRECT)

# (estimator label, specification label, recipe)
GRID = (
    ("reg_naive", "-", Recipe("reg_naive", mu=MU_NAIVE)),
    ("dr_naive", "-", Recipe("dr_naive", mu=MU_NAIVE, pi_a=PI_A_NAIVE)),
    ("reg", "mu correct", Recipe("reg", mu=MU_CORRECT)),
    ("reg", "mu incorrect", Recipe("reg", mu=MU_WRONG)),
    ("ipw", "pi correct", Recipe("ipw_stabilized", pi_s=PI_S_CORRECT, pi_a=PI_A_CORRECT)),
    ("ipw", "pi incorrect", Recipe("ipw_stabilized", pi_s=PI_S_WRONG, pi_a=PI_A_WRONG)),
    ("dr", "all correct", Recipe("dr", mu=MU_CORRECT, pi_s=PI_S_CORRECT, pi_a=PI_A_CORRECT)),
    ("dr", "mu correct", Recipe("dr", mu=MU_CORRECT, pi_s=PI_S_WRONG, pi_a=PI_A_WRONG)),
    ("dr", "pi correct", Recipe("dr", mu=MU_WRONG, pi_s=PI_S_CORRECT, pi_a=PI_A_CORRECT)),
)


# --------------------------------------------------------------------------- metrics


def trim_counts(m: int, fraction: float = 0.01) -> tuple[int, int]:
    """Replicates dropped from the (lower, upper) tail: ceil(fraction * m) split evenly,
    any odd one coming off the upper tail."""
    k = math.ceil(fraction * m - 1e-9)
    return k // 2, k - k // 2


def trimmed_mean(values, fraction: float = 0.01) -> float:
    vals = np.sort(np.asarray(values, dtype=np.float64))
    lo, hi = trim_counts(vals.size, fraction)
    kept = vals[lo:vals.size - hi]
    return float(np.mean(kept))


@dataclass(frozen=True)
class MetricRow:
    bias: float
    median_se: float
    coverage: float
    reps_used: int
    trimmed: int


def metrics(estimates, ses, hits, theta0: float = THETA0, trim: float = 0.01) -> MetricRow:
    """Trimmed bias, median SE and coverage over replicates (NaN entries are skipped)."""
    est = np.asarray(estimates, dtype=np.float64)
    se = np.asarray(ses, dtype=np.float64)
    hit = np.asarray(hits, dtype=bool)
    ok = np.isfinite(est) & np.isfinite(se)
    est, se, hit = est[ok], se[ok], hit[ok]
    if est.size == 0:
        return MetricRow(math.nan, math.nan, math.nan, 0, 0)
    lo, hi = trim_counts(est.size, trim)
    return MetricRow(trimmed_mean(est, trim) - theta0, float(np.median(se)), float(np.mean(hit)),
                     int(est.size), lo + hi)


# --------------------------------------------------------------------------- study


@dataclass
class ReplicateOutcome:
    estimates: np.ndarray
    ses: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    errors: list


def run_replicate(config: ScenarioConfig, recipes, boot_b: int, alpha: float) -> ReplicateOutcome:
    """One dataset: every recipe's estimate plus its bootstrap SE and percentile CI."""
    d, _ = generate(config)
    k = len(recipes)
    engine = MultiEstimator(d, recipes)
    est, errors = engine.evaluate(full=True)
    ses = np.full(k, np.nan)
    lower = np.full(k, np.nan)
    upper = np.full(k, np.nan)
    reps = replicate(d, lambda w: engine.evaluate(w)[0], boot_b, config.seed)
    for i in range(k):
        if errors[i] is not None:
            continue
        try:
            se, ci, _ = summarize_replicates(reps[:, i], alpha)
        except BootstrapUnstable as exc:
            errors[i] = str(exc)
            est[i] = np.nan
            continue
        ses[i], lower[i], upper[i] = se, ci[0], ci[1]
    return ReplicateOutcome(est, ses, lower, upper, errors)


def _task(args):
    config, boot_b, alpha = args
    return run_replicate(config, [g[2] for g in GRID], boot_b, alpha)


@dataclass
class SimReport:
    """Per (scenario, estimator, specification) summaries plus the raw replicate values."""

    rows: list = field(default_factory=list)
    raw: list = field(default_factory=list)
    reps: int = 0

    CSV_COLUMNS = ("scenario", "estimator", "spec", "bias", "median_se", "coverage", "reps_used", "skipped")

    def row(self, scenario: str, estimator: str, spec: str) -> dict:
        for r in self.rows:
            if (r["scenario"], r["estimator"], r["spec"]) == (scenario, estimator, spec):
                return r
        raise KeyError((scenario, estimator, spec))

    def max_skip_rate(self) -> float:
        return max((r["skipped"] / self.reps for r in self.rows), default=0.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(self.CSV_COLUMNS)
        for r in self.rows:
            out.writerow([r["scenario"], r["estimator"], r["spec"], _fmt(r["bias"]), _fmt(r["median_se"]),
                          _fmt(r["coverage"]), r["reps_used"], r["skipped"]])
        return buf.getvalue()

    def raw_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(("scenario", "replicate", "estimator", "spec", "estimate", "se", "ci_lo", "ci_hi", "error"))
        for rec in self.raw:
            out.writerow([rec[0], rec[1], rec[2], rec[3]] + [_fmt(v) for v in rec[4:8]] + [rec[8] or ""])
        return buf.getvalue()

    def table(self) -> str:
        """Aligned text: one block per scenario, bias / median SE / coverage per row."""
        lines = []
        header = f"{'estimator':<10} {'specification':<14} {'bias':>7} {'SE':>6} {'coverage':>9} {'reps':>5}"
        for scen in dict.fromkeys(r["scenario"] for r in self.rows):
            d, e, f = SCENARIOS[scen]
            lines.append(f"Scenario {scen} ({d}, {e}, {f})")
            lines.append(header)
            for r in self.rows:
                if r["scenario"] != scen:
                    continue
                cov = "nan" if math.isnan(r["coverage"]) else f"{100 * r['coverage']:.1f}%"
                lines.append(f"{r['estimator']:<10} {r['spec']:<14} {r['bias']:>7.2f} {r['median_se']:>6.2f} "
                             f"{cov:>9} {r['reps_used']:>5}")
            lines.append("")
        return "\n".join(lines)


def _fmt(v) -> str:
    return repr(float(v))


def run_study(scenarios, reps: int = 500, n: int = 1000, boot_b: int = 200, alpha: float = 0.05,
              seed: int = 0, threads: int = 1, trim: float = 0.01) -> SimReport:
    """Run every scenario for ``reps`` replicates and summarize each grid row.

    Replicate r of scenario s uses seed ``derive_seed(seed, s, r)``; results are
    folded in replicate order, so the report does not depend on ``threads``.
    """
    report = SimReport(reps=reps)
    for scen in scenarios:
        tasks = [(ScenarioConfig.scenario(scen, n, derive_seed(seed, scen, r)), boot_b, alpha)
                 for r in range(reps)]
        if threads <= 1:
            outcomes = [_task(t) for t in tasks]
        else:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                outcomes = list(pool.map(_task, tasks, chunksize=max(1, reps // (4 * threads))))
        for i, (label, spec, _) in enumerate(GRID):
            est = np.array([o.estimates[i] for o in outcomes])
            se = np.array([o.ses[i] for o in outcomes])
            lo = np.array([o.lower[i] for o in outcomes])
            hi = np.array([o.upper[i] for o in outcomes])
            m = metrics(est, se, (lo <= THETA0) & (THETA0 <= hi), THETA0, trim)
            report.rows.append({"scenario": scen, "estimator": label, "spec": spec, "bias": m.bias,
                                "median_se": m.median_se, "coverage": m.coverage, "reps_used": m.reps_used,
                                "skipped": reps - m.reps_used})
            for r, o in enumerate(outcomes):
                report.raw.append((scen, r, label, spec, o.estimates[i], o.ses[i], o.lower[i], o.upper[i],
                                   o.errors[i]))
    return report
