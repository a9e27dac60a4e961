"""Map summaries, organ ratios, normality and group-difference tests, ranking."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import betainc, ndtr, ndtri

from .models import MODELS
from .volume_io import FeatureTable

log = logging.getLogger(__name__)

MODE_BINS = 64
SUMMARY_STATS = ("mean", "median", "min", "max", "mode", "variance")


class StatsError(ValueError):
    pass


class MapSummary(NamedTuple):
    mean: float
    median: float
    min: float
    max: float
    mode: float
    variance: float


def histogram_mode(values, bins: int = MODE_BINS) -> float:
    """Centre of the most populated of ``bins`` equal-width bins over [min, max].

    Ties go to the lowest bin; a constant sample returns its value.
    """
    v = np.asarray(values, dtype=float)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return lo
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    k = int(np.argmax(counts))
    return float(0.5 * (edges[k] + edges[k + 1]))


def summarize_values(values) -> MapSummary:
    """Summary statistics over the finite entries of ``values``."""
    v = np.asarray(values, dtype=float).ravel()
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise StatsError("no present values to summarize")
    if v.size == 1:
        log.warning("single present voxel: variance reported as 0")
    return MapSummary(float(v.mean()), float(np.median(v)), float(v.min()), float(v.max()),
                      histogram_mode(v), float(v.var()))


def summarize_map(pmap, param: str, mask=None) -> MapSummary:
    """Summary of one parameter of a ParameterMap over present in-mask voxels."""
    values = pmap.param(param)
    present = np.all(np.isfinite(pmap.data), axis=-1)
    if mask is not None:
        present &= np.asarray(getattr(mask, "data", mask), dtype=bool)
    return summarize_values(values[present])


def organ_ratio(numerator, denominator) -> float:
    """Plain quotient; NaN when either side is absent or the denominator is 0."""
    num, den = float(numerator), float(denominator)
    if math.isnan(num) or math.isnan(den):
        return float("nan")
    if den == 0:
        log.warning("organ ratio with zero denominator reported absent")
        return float("nan")
    return num / den


# ---------------------------------------------------------------------------
# hypothesis tests

@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    df: float | None = None

    __test__ = False  # keep pytest from collecting this class


def _poly(c, x):
    # c[0] + c[1] x + c[2] x^2 + ...
    return sum(ci * x ** i for i, ci in enumerate(c))


def _shapiro_coefficients(n: int) -> np.ndarray:
    """Royston's approximation to the Shapiro-Wilk weights (upper half)."""
    nn2 = n // 2
    if n == 3:
        return np.array([math.sqrt(0.5)])
    i = np.arange(1, nn2 + 1)
    m = ndtri((i - 0.375) / (n + 0.25))  # negative for the lower half
    summ2 = 2.0 * np.sum(m * m)
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a = m.copy()
    a1 = _poly([0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056], rsn) - m[0] / ssumm2
    if n > 5:
        a2 = -m[1] / ssumm2 + _poly([0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633], rsn)
        fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2) / (1 - 2 * a1 ** 2 - 2 * a2 ** 2))
        a[2:] = -m[2:] / fac
        a[1] = a2
    else:
        fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a1 ** 2))
        a[1:] = -m[1:] / fac
    a[0] = a1
    return a


def shapiro_wilk(samples) -> TestResult:
    """Shapiro-Wilk W with Royston's normalizing transform for the p-value."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if not 3 <= n <= 5000:
        raise StatsError(f"Shapiro-Wilk needs 3 <= n <= 5000, got {n}")
    if not np.all(np.isfinite(x)):
        raise StatsError("samples must be finite")
    ssq = float(np.sum((x - x.mean()) ** 2))
    if ssq <= 0 or x[-1] - x[0] <= 0:
        raise StatsError("zero sample variance")
    a = _shapiro_coefficients(n)
    k = a.size
    num = float(np.dot(a, x[::-1][:k] - x[:k]))
    w = min(1.0, num * num / ssq)

    if n == 3:
        # exact distribution for three samples
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return TestResult(w, float(min(1.0, max(0.0, p))))
    y = math.log1p(-w) if w < 1 else -math.inf
    if n <= 11:
        gamma = _poly([-2.273, 0.459], n)
        if y >= gamma:
            return TestResult(w, 1e-99)
        y = -math.log(gamma - y)
        mu = _poly([0.544, -0.39978, 0.025054, -6.714e-4], n)
        sigma = math.exp(_poly([1.3822, -0.77857, 0.062767, -0.0020322], n))
    else:
        ln = math.log(n)
        mu = _poly([-1.5861, -0.31082, -0.083751, 0.0038915], ln)
        sigma = math.exp(_poly([-0.4803, -0.082676, 0.0030302], ln))
    p = 1.0 - float(ndtr((y - mu) / sigma)) if math.isfinite(y) else 1.0
    return TestResult(w, float(min(1.0, max(0.0, p))))


def t_two_sided_p(t: float, df: float) -> float:
    """Two-sided Student-t tail probability via the regularized incomplete beta."""
    if math.isinf(t):
        return 0.0
    return float(betainc(0.5 * df, 0.5, df / (df + t * t)))


def t_test(group_a, group_b, pooled: bool = False, paired: bool = False) -> TestResult:
    """Two-sample t-test (Welch by default), t = mean(A) - mean(B) scaled."""
    a = np.asarray(group_a, dtype=float).ravel()
    b = np.asarray(group_b, dtype=float).ravel()
    if paired:
        if a.size != b.size:
            raise StatsError("paired test needs equal group sizes")
        d = a - b
        if d.size < 2:
            raise StatsError("paired test needs n >= 2")
        sd = d.std(ddof=1)
        if sd == 0:
            raise StatsError("degenerate variance: constant paired differences")
        t = d.mean() / (sd / math.sqrt(d.size))
        df = d.size - 1.0
        return TestResult(float(t), t_two_sided_p(t, df), df)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise StatsError("each group needs n >= 2")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        raise StatsError("degenerate variance: both groups constant")
    diff = a.mean() - b.mean()
    if pooled:
        df = na + nb - 2.0
        sp2 = ((na - 1) * va + (nb - 1) * vb) / df
        t = diff / math.sqrt(sp2 * (1.0 / na + 1.0 / nb))
    else:
        qa, qb = va / na, vb / nb
        t = diff / math.sqrt(qa + qb)
        df = (qa + qb) ** 2 / (qa * qa / (na - 1) + qb * qb / (nb - 1))
    return TestResult(float(t), t_two_sided_p(t, df), float(df))


def benjamini_hochberg(p) -> np.ndarray:
    """BH step-up adjusted p-values; NaN entries stay NaN."""
    p = np.asarray(p, dtype=float)
    out = np.full(p.shape, np.nan)
    ok = np.flatnonzero(np.isfinite(p))
    if ok.size == 0:
        return out
    order = ok[np.argsort(p[ok], kind="stable")]
    m = order.size
    adj = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(adj[::-1])[::-1]
    out[order] = np.minimum(adj, 1.0)
    return out


# ---------------------------------------------------------------------------
# ranking

class RankedFeature(NamedTuple):
    feature: str
    t: float
    p: float
    p_adjusted: float
    n_control: int
    n_fgr: int


def rank_features(table: FeatureTable, pooled: bool = False, correction: str | None = None,
                  alpha: float = 0.05) -> tuple[list[RankedFeature], list[RankedFeature]]:
    """Control-vs-FGR t-test per feature, ordered by significance.

    Returns ``(ranked, significant)``. Order: ascending p, then |t|
    descending, then feature name; untestable features (too few present
    values, constant in both cohorts) come last with NaN statistics.
    ``correction='bh'`` makes ``significant`` use Benjamini-Hochberg
    adjusted p-values.
    """
    cohorts = table.cohorts
    ctrl, fgr = cohorts == "control", cohorts == "fgr"
    if ctrl.sum() < 2 or fgr.sum() < 2:
        raise StatsError("both cohorts need at least two subjects")
    if correction not in (None, "bh"):
        raise ValueError(f"unknown correction {correction!r}")
    entries = []
    for k, name in enumerate(table.feature_names):
        col = table.rows[:, k]
        a, b = col[ctrl], col[fgr]
        a, b = a[np.isfinite(a)], b[np.isfinite(b)]
        try:
            res = t_test(a, b, pooled=pooled)
            t, p = res.statistic, res.p_value
        except StatsError:
            t, p = float("nan"), float("nan")
        entries.append((name, t, p, a.size, b.size))
    p_all = np.array([e[2] for e in entries])
    p_adj = benjamini_hochberg(p_all) if correction == "bh" else p_all

    def key(i):
        name, t, p = entries[i][:3]
        testable = math.isfinite(p)
        return (not testable, p if testable else 0.0, -abs(t) if testable else 0.0, name)

    order = sorted(range(len(entries)), key=key)
    ranked = [RankedFeature(entries[i][0], entries[i][1], entries[i][2], float(p_adj[i]),
                            entries[i][3], entries[i][4]) for i in order]
    significant = [r for r in ranked if math.isfinite(r.p_adjusted) and r.p_adjusted < alpha]
    return ranked, significant


# ---------------------------------------------------------------------------
# tabular report

PARAM_LABELS = {
    "S0": "S0", "f": "Perfusion Fraction", "Dstar": "D*", "ADC": "ADC", "T2": "T2",
    "T2p": "T2 Pseudo-Diffusion", "T2t": "T2 Tissue", "T2fb": "T2 Fetal Blood",
    "nu": "Maternal Blood Fraction", "b0": "Raw Signal",
}
REPORT_COLUMNS = ("Model Fitting Technique", "Parameter", "Average Metric",
                  "Pairwise Group Comparison", "Organ", "T Statistic", "P-Value")


def describe_feature(name: str) -> dict[str, str]:
    """Split ``organ/model/param/statistic`` into report cells."""
    parts = name.split("/")
    if len(parts) != 4:
        return {"Model Fitting Technique": "", "Parameter": name, "Average Metric": "",
                "Organ": ""}
    organ, model, param, stat = parts
    organ_label = "/".join(o.capitalize() for o in organ.split(":"))
    model_label = MODELS[model].label if model in MODELS else "MRI Scan"
    if "_" in stat:
        feat, agg = stat.rsplit("_", 1)
        metric = f"{agg.capitalize()} {feat.capitalize()}"
    else:
        metric = stat.capitalize()
    return {"Model Fitting Technique": model_label, "Parameter": PARAM_LABELS.get(param, param),
            "Average Metric": metric, "Organ": organ_label}


def write_ranking_csv(ranked, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in ranked:
            cells = describe_feature(r.feature)
            cells["Pairwise Group Comparison"] = "Control vs FGR"
            cells["T Statistic"] = "" if math.isnan(r.t) else repr(r.t)
            cells["P-Value"] = "" if math.isnan(r.p) else repr(r.p)
            w.writerow([cells[c] for c in REPORT_COLUMNS])
    return path
