"""Significance testing over metric-record tables.

Distribution functions are self-contained: Student-t and F tail
probabilities come from the regularized incomplete beta function (Lentz
continued fraction, |err| < 1e-10 over the tested range), and the
studentized range distribution is evaluated by nested Gauss-Legendre
quadrature (160 inner nodes over the normal kernel, 120 outer nodes over
the scale density, target |err| < 1e-6).

CV cells are treated as repeated-measures "subjects" despite fold-overlap
dependence; the caveat is deliberate and mirrors common practice for
repeated CV comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .downstream import MetricRecord
from .errors import IncompleteTable, ZeroVarianceDifferences

LOWER_IS_BETTER = {"MAE": True, "RMSE": True, "R2": False, "Pearson": False,
                   "Spearman": False}


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
             + a * math.log(x) + b * math.log(1.0 - x))
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, df: int) -> float:
    x = df / (df + t * t)
    tail = 0.5 * reg_inc_beta(df / 2.0, 0.5, x)  # P(T > |t|)
    return 1.0 - tail if t >= 0 else tail


def t_sf(t: float, df: int) -> float:
    return 1.0 - t_cdf(t, df)


def t_ppf(p: float, df: int) -> float:
    """Inverse t CDF by bisection; used for confidence intervals."""
    lo, hi = -1e3, 1e3
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def f_sf(f: float, d1: int, d2: int) -> float:
    if f <= 0:
        return 1.0
    return reg_inc_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))


def _phi(z):
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def _Phi(z):
    from scipy.special import erf
    return 0.5 * (1.0 + erf(z / math.sqrt(2.0)))


_INNER_NODES = 160
_OUTER_NODES = 120


def studentized_range_cdf(q: float, k: int, df: int) -> float:
    """P(Q <= q) for the range of k standard normals divided by an
    independent chi/sqrt(df) scale estimate."""
    if q <= 0:
        return 0.0
    zs, zw = np.polynomial.legendre.leggauss(_INNER_NODES)
    z_lo, z_hi = -9.0, 9.0
    z = 0.5 * (z_hi - z_lo) * zs + 0.5 * (z_hi + z_lo)
    zw = zw * 0.5 * (z_hi - z_lo)
    phi_z, Phi_z = _phi(z), _Phi(z)

    s_hi = 1.0 + 12.0 / math.sqrt(2.0 * df)
    ss, sw = np.polynomial.legendre.leggauss(_OUTER_NODES)
    s = 0.5 * s_hi * ss + 0.5 * s_hi
    sw = sw * 0.5 * s_hi
    ln_fs = ((df / 2.0) * math.log(df) + (df - 1.0) * np.log(s)
             - df * s * s / 2.0 - (df / 2.0 - 1.0) * math.log(2.0)
             - math.lgamma(df / 2.0))
    fs = np.exp(ln_fs)

    diff = Phi_z[None, :] - _Phi(z[None, :] - q * s[:, None])
    np.clip(diff, 0.0, 1.0, out=diff)
    inner = k * (phi_z[None, :] * diff ** (k - 1)) @ zw
    return float(np.clip((fs * inner) @ sw, 0.0, 1.0))


def studentized_range_sf(q: float, k: int, df: int) -> float:
    return 1.0 - studentized_range_cdf(q, k, df)


def q_crit(alpha: float, k: int, df: int) -> float:
    """Upper critical value of the studentized range, by bisection."""
    lo, hi = 1e-6, 100.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if studentized_range_sf(mid, k, df) > alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# tests
# ---------------------------------------------------------------------------

@dataclass
class PairedSample:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.shape != self.b.shape or self.a.size < 3:
            raise ValueError("paired sample needs equal lengths >= 3")


def paired_t(sample: PairedSample, tail: str = "two"):
    """Returns (t, df, p). ``greater`` tests mean(a - b) > 0."""
    d = sample.a - sample.b
    n = len(d)
    sd = d.std(ddof=1)
    if sd == 0:
        raise ZeroVarianceDifferences(
            "identical paired samples: p undefined, not 1")
    t = d.mean() / (sd / math.sqrt(n))
    df = n - 1
    if tail == "two":
        p = 2.0 * t_sf(abs(t), df)
    elif tail == "greater":
        p = t_sf(t, df)
    elif tail == "less":
        p = t_cdf(t, df)
    else:
        raise ValueError(f"tail must be two/greater/less, got {tail}")
    return float(t), df, float(p)


@dataclass
class RmAnovaResult:
    F: float
    df_treatment: int
    df_error: int
    ms_error: float
    p: float
    means: np.ndarray
    n_subjects: int


def anova_rm(values: np.ndarray) -> RmAnovaResult:
    """One within-subject factor ANOVA on an (m models x s subjects) table.

    SS_total = SS_subjects + SS_treatment + SS_error;
    F = MS_treatment / MS_error with df (m-1), (m-1)(s-1)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or np.isnan(values).any():
        raise IncompleteTable("ANOVA-RM needs a complete m x s table")
    m, s = values.shape
    if m < 2 or s < 2:
        raise IncompleteTable("need at least 2 models and 2 subjects")
    grand = values.mean()
    model_means = values.mean(axis=1)
    subj_means = values.mean(axis=0)
    ss_treat = s * ((model_means - grand) ** 2).sum()
    ss_subj = m * ((subj_means - grand) ** 2).sum()
    ss_total = ((values - grand) ** 2).sum()
    ss_err = ss_total - ss_treat - ss_subj
    df_t = m - 1
    df_e = (m - 1) * (s - 1)
    ms_t = ss_treat / df_t
    ms_e = ss_err / df_e
    if ms_t == 0.0:
        f = 0.0
    elif ms_e <= 0.0:
        f = math.inf
    else:
        f = ms_t / ms_e
    p = 1.0 if f == 0.0 else (0.0 if math.isinf(f) else f_sf(f, df_t, df_e))
    return RmAnovaResult(F=float(f), df_treatment=df_t, df_error=df_e,
                         ms_error=float(ms_e), p=float(p), means=model_means,
                         n_subjects=s)


def tukey_hsd_rm(result: RmAnovaResult, alpha: float = 0.05) -> list[dict]:
    """All-pairs comparisons using the ANOVA-RM error term as the SEM
    source: q = |mean_i - mean_j| / sqrt(MS_error / s)."""
    m = len(result.means)
    se = math.sqrt(max(result.ms_error, 0.0) / result.n_subjects)
    half = q_crit(alpha, m, result.df_error) * se if se > 0 else 0.0
    table = []
    for i in range(m):
        for j in range(i + 1, m):
            diff = float(result.means[i] - result.means[j])
            if se == 0:
                q = 0.0 if diff == 0 else math.inf
                p = 1.0 if diff == 0 else 0.0
            else:
                q = abs(diff) / se
                p = studentized_range_sf(q, m, result.df_error)
            table.append(dict(a=i, b=j, diff=diff, q=float(q), p=float(p),
                              ci_low=diff - half, ci_high=diff + half))
    return table


def stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def align_records(records: list[MetricRecord], models: list[str],
                  metric: str) -> np.ndarray:
    """Build the (m models x s cells) table aligned on
    (dataset, repeat, fold); raises if any cell is missing."""
    by_model: dict[str, dict[tuple, float]] = {m: {} for m in models}
    for r in records:
        if r.metric != metric or r.model not in by_model:
            continue
        if r.value is None:
            raise IncompleteTable(
                f"missing {metric} value for {r.model} at "
                f"({r.dataset}, {r.repeat}, {r.fold})")
        by_model[r.model][(r.dataset, r.repeat, r.fold)] = r.value
    keys = None
    for m in models:
        cells = set(by_model[m])
        if not cells:
            raise IncompleteTable(f"no {metric} records for model {m}")
        keys = cells if keys is None else keys & cells
    keys = sorted(keys)
    if any(len(by_model[m]) != len(keys) for m in models):
        raise IncompleteTable("models are not aligned on the same CV cells")
    return np.array([[by_model[m][k] for k in keys] for m in models])


def significance_report(records: list[MetricRecord], models: list[str],
                        metric: str) -> dict:
    """Per-model mean with t-based 95% CI plus the ANOVA-RM/Tukey pairwise
    matrix, annotated with direction arrows toward the better model."""
    table = align_records(records, models, metric)
    m, s = table.shape
    tcrit = t_ppf(0.975, s - 1)
    means = table.mean(axis=1)
    ci = tcrit * table.std(axis=1, ddof=1) / math.sqrt(s)
    report = {
        "metric": metric,
        "models": list(models),
        "means": means.tolist(),
        "ci": ci.tolist(),
        "n_cells": s,
        "pairwise": [],
    }
    if m < 2:
        return report
    anova = anova_rm(table)
    report["anova"] = {"F": anova.F, "df_treatment": anova.df_treatment,
                       "df_error": anova.df_error, "p": anova.p,
                       "ms_error": anova.ms_error}
    lower_better = LOWER_IS_BETTER.get(metric, False)
    for row in tukey_hsd_rm(anova):
        i, j = row["a"], row["b"]
        if row["diff"] == 0:
            direction = "="
        else:
            a_better = (row["diff"] < 0) == lower_better
            direction = "<-" if a_better else "->"
        report["pairwise"].append({
            "a": models[i], "b": models[j], "diff": row["diff"],
            "q": row["q"], "p": row["p"], "ci": [row["ci_low"], row["ci_high"]],
            "direction": direction, "stars": stars(row["p"]),
        })
    return report


def report_to_csv(report: dict, path) -> None:
    import csv
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "model_a", "model_b", "mean_a", "mean_b",
                    "diff", "q", "p", "stars", "direction"])
        means = dict(zip(report["models"], report["means"]))
        for row in report["pairwise"]:
            w.writerow([report["metric"], row["a"], row["b"],
                        means[row["a"]], means[row["b"]], row["diff"],
                        row["q"], row["p"], row["stars"], row["direction"]])
