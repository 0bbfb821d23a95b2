"""Binary classification metrics, multi-seed aggregation and Welch's t-test.

Undefined ratios (zero denominator) are ``None`` in Python, ``null`` in JSON
and ``NA`` in delimited tables. The t-distribution tail is computed from a
local regularized incomplete beta so that the significance path has no
dependency beyond the standard library.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

METRICS = ("accuracy", "sensitivity", "specificity", "precision")
NA = "NA"


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for k in ("tp", "fp", "tn", "fn"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise MetricError(f"{k} must be a non-negative integer, got {v!r}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def flipped(self) -> "ConfusionMatrix":
        """Same predictions with the negative class treated as positive."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionMatrix:
    """Counts with class 1 as the positive class."""
    preds = [int(p) for p in predictions]
    labs = [int(y) for y in labels]
    if len(preds) != len(labs):
        raise MetricError(f"length mismatch: {len(preds)} predictions vs {len(labs)} labels")
    if not preds:
        raise MetricError("empty inputs")
    if any(v not in (0, 1) for v in preds + labs):
        raise MetricError("predictions and labels must be 0/1")
    tp = sum(1 for p, y in zip(preds, labs) if p == 1 and y == 1)
    fp = sum(1 for p, y in zip(preds, labs) if p == 1 and y == 0)
    tn = sum(1 for p, y in zip(preds, labs) if p == 0 and y == 0)
    return ConfusionMatrix(tp, fp, tn, len(preds) - tp - fp - tn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class MetricReport:
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    precision: float | None
    cm: ConfusionMatrix | None = None

    def values(self) -> dict[str, float | None]:
        return {m: getattr(self, m) for m in METRICS}

    def to_dict(self) -> dict:
        d = self.values()
        if self.cm is not None:
            d["confusion"] = asdict(self.cm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        cm = ConfusionMatrix(**d["confusion"]) if d.get("confusion") else None
        return cls(*(d.get(m) for m in METRICS), cm=cm)


def metrics(cm: ConfusionMatrix) -> MetricReport:
    if cm.total == 0:
        raise MetricError("empty confusion matrix")
    return MetricReport(
        accuracy=_ratio(cm.tp + cm.tn, cm.total),
        sensitivity=_ratio(cm.tp, cm.tp + cm.fn),
        specificity=_ratio(cm.tn, cm.tn + cm.fp),
        precision=_ratio(cm.tp, cm.tp + cm.fp),
        cm=cm,
    )


@dataclass
class MetricSummary:
    mean: float
    std: float | None  # None when fewer than two defined values
    n: int
    n_undefined: int


@dataclass
class RunAggregate:
    reports: list[MetricReport]
    summary: dict[str, MetricSummary] = field(default_factory=dict)

    @property
    def n_runs(self) -> int:
        return len(self.reports)

    def mean(self, metric: str) -> float:
        return self.summary[metric].mean

    def std(self, metric: str) -> float | None:
        return self.summary[metric].std

    def to_dict(self) -> dict:
        return {
            "n_runs": self.n_runs,
            "reports": [r.to_dict() for r in self.reports],
            "summary": {m: asdict(s) for m, s in self.summary.items()},
        }


def aggregate(reports: Iterable[MetricReport]) -> RunAggregate:
    """Mean and sample standard deviation per metric, skipping undefined entries."""
    reports = list(reports)
    if not reports:
        raise MetricError("nothing to aggregate")
    out = RunAggregate(reports)
    for m in METRICS:
        vals = [getattr(r, m) for r in reports if getattr(r, m) is not None]
        if not vals:
            raise MetricError(f"{m} is undefined in every report")
        n = len(vals)
        mean = math.fsum(vals) / n
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (n - 1)) if n > 1 else None
        out.summary[m] = MetricSummary(mean, std, n, len(reports) - n)
    return out


# -- tables -------------------------------------------------------------------------

def fmt(v) -> str:
    if v is None:
        return NA
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(rows: list[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def _parse_cell(v: str):
    if v == NA or v == "":
        return None
    for kind in (int, float):
        try:
            return kind(v)
        except ValueError:
            pass
    return v


def read_table(text: str) -> list[dict]:
    """Parse a table written by :func:`write_table`; ``NA`` becomes ``None``."""
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append({k: _parse_cell(v) for k, v in row.items()})
    return rows


def summary_columns() -> list[str]:
    cols = []
    for m in METRICS:
        cols += [f"{m}_mean", f"{m}_std"]
    return cols


def summary_row(agg: RunAggregate) -> dict:
    row = {}
    for m in METRICS:
        row[f"{m}_mean"] = agg.mean(m)
        row[f"{m}_std"] = agg.std(m)
    return row


def report_table(agg: RunAggregate, seeds: Sequence[int]) -> str:
    """Per-seed rows followed by ``mean`` and ``std`` rows."""
    rows = []
    for seed, r in zip(seeds, agg.reports):
        cm = r.cm
        rows.append({"run": seed, **r.values(),
                     **({"tp": cm.tp, "fp": cm.fp, "tn": cm.tn, "fn": cm.fn} if cm else {})})
    rows.append({"run": "mean", **{m: agg.mean(m) for m in METRICS}})
    rows.append({"run": "std", **{m: agg.std(m) for m in METRICS}})
    return write_table(rows, ["run", *METRICS, "tp", "fp", "tn", "fn"])


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False)


# -- Welch's t-test -------------------------------------------------------------------

_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAX_ITER = 10000


def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _CF_TINY else _CF_TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _CF_TINY else _CF_TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)`` for ``a, b > 0``."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    # the fraction converges fast only below the mean; reflect otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_cf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _beta_cf(b, a, 1.0 - x) / b


def t_sf(t: float, dof: float) -> float:
    """Survival function ``P(T > t)`` of Student's t with real ``dof > 0``."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * betainc(0.5 * dof, 0.5, dof / (dof + t * t))
    return tail if t >= 0 else 1.0 - tail


@dataclass(frozen=True)
class WelchResult:
    t: float
    dof: float
    p: float


def _mean_var(xs: Sequence[float]) -> tuple[float, float, int]:
    n = len(xs)
    m = math.fsum(xs) / n
    return m, math.fsum((x - m) ** 2 for x in xs) / (n - 1), n


def welch_t_one_tailed(sample_a: Sequence[float], sample_b: Sequence[float]) -> WelchResult:
    """One-tailed Welch test of ``mean(a) > mean(b)``."""
    a = [float(v) for v in sample_a]
    b = [float(v) for v in sample_b]
    if len(a) < 2 or len(b) < 2:
        raise MetricError("each sample needs at least two values")
    ma, va, na = _mean_var(a)
    mb, vb, nb = _mean_var(b)
    sa, sb = va / na, vb / nb
    se2 = sa + sb
    if not se2 > 0:
        raise MetricError("degenerate variance: both samples are constant")
    t = (ma - mb) / math.sqrt(se2)
    dof = se2 * se2 / ((sa * sa / (na - 1) if sa else 0.0) + (sb * sb / (nb - 1) if sb else 0.0))
    return WelchResult(t, dof, t_sf(t, dof))
