"""Bootstrap summaries, Welch's t-test and significance-aware ranking."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .sampling import RngStream, resample_indices

ALPHA = 0.05
BETA_TOL = 1e-12
BETA_MAX_ITER = 10_000


def _betacf(x: float, a: float, b: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETA_TOL:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for x={x}, a={a}, b={b}")


def betainc(x: float, a: float, b: float) -> float:
    """Regularised incomplete beta function I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    # the continued fraction converges fast only on this side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(x, a, b) / a
    return 1.0 - front * _betacf(1.0 - x, b, a) / b


def t_two_sided_p(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t distribution."""
    if math.isinf(t):
        return 0.0
    return betainc(df / (df + t * t), 0.5 * df, 0.5)


class TTest(NamedTuple):
    statistic: float
    pvalue: float
    df: float
    identical: bool = False


def welch_t_test(a, b) -> TTest:
    """Unequal-variance two-sample t-test with Welch-Satterthwaite df.

    When both samples have zero variance the statistic is undefined; the
    result then carries NaNs and ``identical`` says whether the means agree.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    na, nb = a.size, b.size
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1) / na, b.var(ddof=1) / nb
    se2 = va + vb
    if se2 == 0.0:
        return TTest(math.nan, math.nan, math.nan, bool(ma == mb))
    t = float((ma - mb) / math.sqrt(se2))
    df = float(se2**2 / (va**2 / (na - 1) + vb**2 / (nb - 1)))
    return TTest(t, t_two_sided_p(t, df), df)


# -- bootstrap ----------------------------------------------------------------


@dataclass
class MetricSummary:
    name: str
    mean: float
    std: float
    n_boot: int
    samples: list[float] = field(repr=False, default_factory=list)
    n_undefined: int = 0


def r2_metric(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0.0:
        return math.nan
    return 1.0 - float(np.sum((y_true - y_pred) ** 2)) / ss_tot


def bootstrap_metric(
    predictions,
    targets,
    metric: Callable[[np.ndarray, np.ndarray], float] = r2_metric,
    n_boot: int = 50,
    stream: RngStream | None = None,
    name: str = "r2",
) -> MetricSummary:
    """Evaluate ``metric(targets, predictions)`` on ``n_boot`` resamples.

    Replicates where the metric is undefined (NaN, e.g. R^2 on a resample with
    constant targets) are dropped and counted in ``n_undefined``.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    targ = np.asarray(targets, dtype=np.float64)
    if pred.shape != targ.shape or len(targ) < 2:
        raise ValueError("predictions and targets need equal shapes and at least two rows")
    if n_boot < 2:
        raise ValueError("n_boot must be at least 2")
    stream = stream or RngStream(0)
    values = []
    for _ in range(n_boot):
        idx = resample_indices(stream, len(targ))
        values.append(float(metric(targ[idx], pred[idx])))
    vals = np.array(values)
    ok = np.isfinite(vals)
    good = vals[ok]
    mean = float(good.mean()) if good.size else math.nan
    std = float(good.std(ddof=1)) if good.size > 1 else 0.0 if good.size else math.nan
    return MetricSummary(name, mean, std, int(good.size), good.tolist(), int((~ok).sum()))


# -- ranking ------------------------------------------------------------------


@dataclass
class RankEntry:
    name: str
    mean: float
    std: float
    flag: str = ""
    p_vs_best: float = math.nan


def rank_encoders(
    summaries: dict[str, MetricSummary], higher_is_better: bool = True, alpha: float = ALPHA
) -> list[RankEntry]:
    """Order by mean; flag ``"best"`` when the leader beats every other entry
    with p < alpha, otherwise flag the top two ``"top2"``."""
    sign = 1.0 if higher_is_better else -1.0
    names = sorted(summaries, key=lambda k: (-sign * summaries[k].mean, k))
    entries = [RankEntry(k, summaries[k].mean, summaries[k].std) for k in names]
    if not entries:
        return entries
    lead = summaries[names[0]]
    significant = True
    for e in entries[1:]:
        test = welch_t_test(lead.samples, summaries[e.name].samples)
        e.p_vs_best = test.pvalue
        better = sign * (lead.mean - e.mean) > 0
        if not (better and test.pvalue < alpha):
            significant = False
    if len(entries) == 1 or significant:
        entries[0].flag = "best"
    else:
        for e in entries[:2]:
            e.flag = "top2"
    return entries


def format_cell(entry: RankEntry, digits: int = 3) -> str:
    text = f"{entry.mean:.{digits}f}±{entry.std:.{digits}f}"
    if entry.flag == "best":
        return f"**{text}**"
    if entry.flag == "top2":
        return f"_{text}_"
    return text


def format_table(columns: dict[str, list[RankEntry]], row_order: list[str] | None = None) -> str:
    """Plain-text table, one column per metric; bold ``**`` marks a significant
    winner, underscores mark the top two otherwise."""
    cells = {c: {e.name: format_cell(e) for e in entries} for c, entries in columns.items()}
    if row_order is None:
        row_order = []
        for entries in columns.values():
            row_order += [e.name for e in entries if e.name not in row_order]
    header = ["method"] + list(columns)
    rows = [[name] + [cells[c].get(name, "-") for c in columns] for name in row_order]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def summaries_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()
