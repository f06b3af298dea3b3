"""Paired nonparametric statistics for system comparisons.

Wilcoxon signed-rank tests (exact by enumeration for small n, tie-corrected
normal approximation otherwise), Holm step-down correction applied within
each metric-category block of pairwise comparisons, paired Cohen's d_z
effect sizes, percentile bootstrap intervals, and the sign-agreement and
Pearson analyses used to compare two raters' effect-size profiles.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, Iterable, Optional, Sequence

import numpy as np
from scipy.special import betainc


class StatsError(ValueError):
    pass


class TooFewSamplesError(StatsError):
    pass


class ZeroVarianceError(StatsError):
    pass


class AllZeroDifferencesError(StatsError):
    pass


@dataclass(frozen=True)
class PairedScores:
    """Per-unit aligned scores of two systems."""

    unit_ids: tuple
    system_a: tuple[float, ...]
    system_b: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.unit_ids) == len(self.system_a) == len(self.system_b)):
            raise StatsError("unit_ids and score lists must have equal lengths")
        if len(self.unit_ids) < 2:
            raise TooFewSamplesError("need at least 2 paired units")

    def differences(self) -> np.ndarray:
        return np.asarray(self.system_a, dtype=np.float64) - np.asarray(
            self.system_b, dtype=np.float64
        )


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    effect_size_dz: float
    n_effective: int
    method: str

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise StatsError(f"p_value {self.p_value} outside [0,1]")


@dataclass(frozen=True)
class EffectPair:
    """One comparison's effect size under two raters (e.g. human vs judge)."""

    label: str
    dz_human: float
    dz_pafi: float

    def __post_init__(self):
        if not (math.isfinite(self.dz_human) and math.isfinite(self.dz_pafi)):
            raise StatsError(f"effect sizes must be finite: {self}")


@dataclass(frozen=True)
class AgreementResult:
    ratio: float
    agreeing: int
    total: int

    def percent_label(self) -> str:
        return f"{100.0 * self.ratio:.1f}%"


# ---------------------------------------------------------------------------
# effect size

def cohens_dz(diffs: Sequence[float]) -> float:
    """mean(diffs) / sample std(diffs), Bessel-corrected."""
    d = np.asarray(diffs, dtype=np.float64)
    if d.size < 2:
        raise TooFewSamplesError(f"need at least 2 differences, got {d.size}")
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise ZeroVarianceError("differences have zero variance")
    return float(d.mean()) / sd


def _dz_guarded(diffs: np.ndarray) -> float:
    # Degenerate constant differences get a signed infinity instead of an
    # exception so a test result can still be reported.
    sd = float(diffs.std(ddof=1))
    mean = float(diffs.mean())
    if sd == 0.0:
        return math.copysign(math.inf, mean) if mean != 0.0 else 0.0
    return mean / sd


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank

def _doubled_ranks(abs_diffs: np.ndarray) -> np.ndarray:
    """Average ranks of |d| scaled by 2, which makes tied ranks integers."""
    order = np.argsort(abs_diffs, kind="stable")
    doubled = np.zeros(abs_diffs.size, dtype=np.int64)
    i = 0
    while i < abs_diffs.size:
        j = i
        while j + 1 < abs_diffs.size and abs_diffs[order[j + 1]] == abs_diffs[order[i]]:
            j += 1
        # positions i..j (0-based) share average rank (i+j+2)/2
        for k in range(i, j + 1):
            doubled[order[k]] = i + j + 2
        i = j + 1
    return doubled


def _exact_p_two_sided(doubled_ranks: np.ndarray, w2_obs: int) -> float:
    """Two-sided p over the 2^n equally likely sign assignments.

    Built by dynamic programming on the doubled-rank sum, so tied ranks stay
    exact integers; the final division is the only float operation.
    """
    n = doubled_ranks.size
    total = int(doubled_ranks.sum())
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        for w in range(total, r - 1, -1):
            if counts[w - r]:
                counts[w] += counts[w - r]
    c_le = sum(counts[: w2_obs + 1])
    c_ge = sum(counts[w2_obs:])
    return min(1.0, 2.0 * min(c_le, c_ge) / (1 << n))


def _approx_p_two_sided(doubled_ranks: np.ndarray, w2_obs: int, n: int) -> float:
    """Normal approximation with tie-corrected variance and 0.5 continuity correction."""
    w_plus = w2_obs / 2.0
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(doubled_ranks, return_counts=True)
    var -= float(((tie_counts**3 - tie_counts) / 48.0).sum())
    centered = w_plus - mu
    if centered == 0.0:
        return 1.0
    z = (centered - math.copysign(0.5, centered)) / math.sqrt(var)
    return math.erfc(abs(z) / math.sqrt(2.0))


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float],
                         mode: str = "auto", exact_max: int = 12) -> TestResult:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are discarded; tied absolute differences receive
    average ranks.  ``mode`` is "exact" (full sign-assignment distribution),
    "approx" (tie-corrected normal with continuity correction), or "auto"
    (exact when the post-discard n is at most ``exact_max``).

    The reported effect size is Cohen's d_z over the raw differences,
    including zeros.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise StatsError(f"score lists differ in length: {a.shape} vs {b.shape}")
    diffs = a - b
    nonzero = diffs[diffs != 0.0]
    if nonzero.size == 0:
        raise AllZeroDifferencesError("every paired difference is zero")
    if nonzero.size < 2:
        raise TooFewSamplesError("fewer than 2 non-zero differences")
    n = nonzero.size
    doubled = _doubled_ranks(np.abs(nonzero))
    w2_obs = int(doubled[nonzero > 0].sum())
    if mode == "auto":
        mode = "exact" if n <= exact_max else "approx"
    if mode == "exact":
        p = _exact_p_two_sided(doubled, w2_obs)
    elif mode == "approx":
        p = _approx_p_two_sided(doubled, w2_obs, n)
    else:
        raise StatsError(f"unknown mode: {mode!r}")
    return TestResult(
        statistic=w2_obs / 2.0,
        p_value=p,
        effect_size_dz=_dz_guarded(diffs),
        n_effective=n,
        method=mode,
    )


# ---------------------------------------------------------------------------
# multiple-comparison correction

def holm_correct(p_values: Sequence[float]) -> list[float]:
    """Step-down Holm adjustment, returned in the input order."""
    p = list(p_values)
    for v in p:
        if not 0.0 <= v <= 1.0:
            raise StatsError(f"p-value {v} outside [0,1]")
    m = len(p)
    order = sorted(range(m), key=lambda i: p[i])
    adjusted = [0.0] * m
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, (m - rank) * p[idx])
        adjusted[idx] = min(1.0, running)
    return adjusted


# ---------------------------------------------------------------------------
# bootstrap

def bootstrap_ci_mean(xs: Sequence[float], iters: int = 10000, level: float = 0.95,
                      rng: Optional[np.random.Generator] = None) -> tuple[float, float]:
    """Percentile bootstrap confidence interval for the mean."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size < 2:
        raise TooFewSamplesError(f"need at least 2 values, got {xs.size}")
    if not 0.0 < level < 1.0:
        raise StatsError(f"level must be in (0,1), got {level}")
    rng = rng if rng is not None else np.random.default_rng(0)
    idx = rng.integers(0, xs.size, size=(iters, xs.size))
    means = xs[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# rater-agreement analyses

def _sign(x: float) -> int:
    return (x > 0) - (x < 0)


def sign_agreement(pairs: Sequence[EffectPair]) -> AgreementResult:
    """Fraction of pairs whose two effect sizes share a sign.

    A zero effect size agrees only with another exact zero.
    """
    if not pairs:
        raise StatsError("no effect pairs given")
    agreeing = sum(1 for p in pairs if _sign(p.dz_human) == _sign(p.dz_pafi))
    return AgreementResult(ratio=agreeing / len(pairs), agreeing=agreeing, total=len(pairs))


def pearson_r(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Product-moment correlation with a two-sided t-distribution p-value."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape:
        raise StatsError(f"lengths differ: {x.size} vs {y.size}")
    n = x.size
    if n < 3:
        raise TooFewSamplesError(f"need at least 3 points, got {n}")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float((xc * xc).sum())
    syy = float((yc * yc).sum())
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVarianceError("a variable has zero variance")
    r = float((xc * yc).sum()) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    nu = n - 2
    if 1.0 - r * r <= 0.0:
        return r, 0.0
    t2 = r * r * nu / (1.0 - r * r)
    p = float(betainc(nu / 2.0, 0.5, nu / (nu + t2)))
    return r, p


# ---------------------------------------------------------------------------
# scores CSV and block analysis

SCORE_FIELDS = ("unit_id", "system", "metric", "score")


def read_scores(stream: IO[str]) -> list[dict]:
    """Rows of ``unit_id,system,metric,score[,category]`` with a header line."""
    reader = csv.DictReader(stream)
    missing = [f for f in SCORE_FIELDS if f not in (reader.fieldnames or [])]
    if missing:
        raise StatsError(f"scores CSV is missing columns: {missing}")
    rows = []
    for record in reader:
        rows.append(
            {
                "unit_id": record["unit_id"],
                "system": record["system"],
                "metric": record["metric"],
                "score": float(record["score"]),
                "category": record.get("category") or "overall",
            }
        )
    return rows


def write_scores(stream: IO[str], rows: Iterable[dict]) -> int:
    writer = csv.writer(stream)
    writer.writerow(SCORE_FIELDS + ("category",))
    n = 0
    for row in rows:
        writer.writerow(
            [row["unit_id"], row["system"], row["metric"], row["score"],
             row.get("category", "overall")]
        )
        n += 1
    return n


def paired_scores(rows: Sequence[dict], metric: str, system_a: str, system_b: str,
                  category: Optional[str] = None) -> PairedScores:
    """Align two systems' scores by unit id for one metric (and category)."""

    def collect(system: str) -> dict:
        out = {}
        for row in rows:
            if row["metric"] != metric or row["system"] != system:
                continue
            if category is not None and row["category"] != category:
                continue
            if row["unit_id"] in out:
                raise StatsError(
                    f"duplicate score for unit {row['unit_id']!r}, system {system!r}"
                )
            out[row["unit_id"]] = row["score"]
        return out

    sa, sb = collect(system_a), collect(system_b)
    units = sorted(set(sa) & set(sb))
    if len(units) < 2:
        raise TooFewSamplesError(
            f"fewer than 2 shared units for {system_a!r} vs {system_b!r}"
        )
    return PairedScores(
        unit_ids=tuple(units),
        system_a=tuple(sa[u] for u in units),
        system_b=tuple(sb[u] for u in units),
    )


def analyze_blocks(rows: Sequence[dict], pairs: Sequence[tuple[str, str]],
                   metric: Optional[str] = None, exact_max: int = 12,
                   correct: str = "holm") -> dict:
    """Run every requested pairwise test within each metric-category block.

    The Holm correction is applied per block, across that block's pairwise
    comparisons, mirroring a protocol where each metric and category forms
    one family of three system comparisons.
    """
    if correct not in ("holm", "none"):
        raise StatsError(f"unknown correction: {correct!r}")
    metrics = sorted({r["metric"] for r in rows}) if metric is None else [metric]
    categories = sorted({r["category"] for r in rows})
    populated = {(r["metric"], r["category"]) for r in rows}
    blocks = []
    for met in metrics:
        for cat in categories:
            if (met, cat) not in populated:
                continue
            comparisons = []
            for sys_a, sys_b in pairs:
                entry = {"pair": f"{sys_a} vs {sys_b}"}
                try:
                    scores = paired_scores(rows, met, sys_a, sys_b, cat)
                    result = wilcoxon_signed_rank(
                        scores.system_a, scores.system_b, mode="auto", exact_max=exact_max
                    )
                    entry.update(
                        statistic=result.statistic,
                        p_raw=result.p_value,
                        dz=None if not math.isfinite(result.effect_size_dz) else result.effect_size_dz,
                        n_effective=result.n_effective,
                        method=result.method,
                    )
                except StatsError as exc:
                    entry["error"] = str(exc)
                comparisons.append(entry)
            tested = [c for c in comparisons if "p_raw" in c]
            if tested:
                if correct == "holm":
                    adjusted = holm_correct([c["p_raw"] for c in tested])
                else:
                    adjusted = [c["p_raw"] for c in tested]
                for c, adj in zip(tested, adjusted):
                    c["p_adjusted"] = adj
            blocks.append({"metric": met, "category": cat, "comparisons": comparisons})
    return {"version": "stats-v1", "correction": correct, "exact_max": exact_max, "blocks": blocks}
