"""Gain ratios, bucketed reports and the constant-correction regression baseline.

The gain ratio compares a strategy's sum of squared one-period hedging errors
with that of hedging at ``delta_bs``::

    gain = 1 - SSE(model) / SSE(benchmark)

0 means no improvement, 1 a perfect hedge; negative values are worse than
the benchmark.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .data import DELTA_BUCKETS, FLOAT_FORMAT, TTM_BUCKETS, SampleSet
from .errors import DegenerateBenchmarkError, DegenerateGroupError, EmptyPartitionError, ShapeMismatchError

LOW_COUNT = 30
GLOBAL = "global"
PER_BUCKET = "per_bucket"


def hedging_errors(hedge_ratios, samples) -> np.ndarray:
    h = np.asarray(hedge_ratios, float)
    if h.shape != np.shape(samples.dv):
        raise ShapeMismatchError(f"{h.size} hedge ratios for {len(samples.dv)} samples")
    return samples.dv - h * samples.ds


def benchmark_errors(samples) -> np.ndarray:
    return samples.dv - samples.delta_bs * samples.ds


def gain_ratio(hedge_ratios, samples) -> float:
    """``1 - SSE(hedge_ratios) / SSE(delta_bs)`` over ``samples``."""
    if len(samples.dv) == 0:
        raise EmptyPartitionError("gain ratio needs at least one sample")
    model = float(np.sum(hedging_errors(hedge_ratios, samples) ** 2))
    bench = float(np.sum(benchmark_errors(samples) ** 2))
    if bench == 0.0:
        raise DegenerateBenchmarkError("benchmark SSE is zero; the gain ratio is undefined")
    return 1.0 - model / bench


@dataclass(frozen=True)
class GroupGain:
    gain: float          # NaN when the group's benchmark SSE is zero
    count: int
    model_sse: float
    benchmark_sse: float

    @property
    def low_count(self) -> bool:
        return self.count < LOW_COUNT


@dataclass
class GainReport:
    model_name: str
    horizon_days: int
    overall_gain: float
    per_bucket: dict = field(default_factory=dict)   # delta bucket -> GroupGain
    per_ttm: dict = field(default_factory=dict)      # ttm category -> GroupGain
    benchmark_mse: float = np.nan
    model_mse: float = np.nan
    count: int = 0
    benchmark_sse: float = np.nan
    model_sse: float = np.nan


def _group_gains(labels, order, model_sq, bench_sq) -> dict:
    out = {}
    for label in order:
        mask = labels == label
        n = int(mask.sum())
        if n == 0:
            continue
        m, b = float(model_sq[mask].sum()), float(bench_sq[mask].sum())
        out[label] = GroupGain(1.0 - m / b if b > 0 else np.nan, n, m, b)
    return out


def report_from_hedges(model_name: str, hedge_ratios, samples: SampleSet) -> GainReport:
    """Overall and bucketed gains for precomputed hedge ratios."""
    if len(samples) == 0:
        raise EmptyPartitionError("cannot report on an empty sample set")
    model_sq = hedging_errors(hedge_ratios, samples) ** 2
    bench_sq = benchmark_errors(samples) ** 2
    n = len(samples)
    per_bucket = _group_gains(np.asarray(samples.bucket, float), DELTA_BUCKETS, model_sq, bench_sq)
    if sum(g.count for g in per_bucket.values()) == n:
        # totals are the bucket sums, so the overall SSEs partition exactly over delta buckets
        model_sse = sum(g.model_sse for g in per_bucket.values())
        bench_sse = sum(g.benchmark_sse for g in per_bucket.values())
    else:
        model_sse, bench_sse = float(model_sq.sum()), float(bench_sq.sum())
    if bench_sse == 0.0:
        raise DegenerateBenchmarkError("benchmark SSE is zero; the gain ratio is undefined")
    model_mse, bench_mse = model_sse / n, bench_sse / n
    return GainReport(
        model_name=model_name,
        horizon_days=samples.horizon_days,
        overall_gain=1.0 - model_mse / bench_mse,
        per_bucket=per_bucket,
        per_ttm=_group_gains(np.asarray(samples.ttm_bucket, object), TTM_BUCKETS, model_sq, bench_sq),
        benchmark_mse=bench_mse,
        model_mse=model_mse,
        count=n,
        benchmark_sse=bench_sse,
        model_sse=model_sse,
    )


def bucketed_report(model, test_samples: SampleSet) -> GainReport:
    """Score a trained model on ``test_samples`` and break the gain down by bucket."""
    from .learner import predict_hedge
    return report_from_hedges(model.label, predict_hedge(model, test_samples), test_samples)


# -- constant-correction baseline --------------------------------------------

@dataclass
class OracleResult:
    grouping: str
    corrections: dict      # group -> constant added to delta_bs
    gain: float            # gain ratio on the samples the corrections were fit to
    hedge_ratios: np.ndarray


def _oracle_groups(samples, grouping):
    if grouping == GLOBAL:
        return np.full(len(samples.dv), GLOBAL, object), [GLOBAL]
    if grouping == PER_BUCKET:
        labels = np.asarray(samples.bucket, float)
        return labels, [b for b in DELTA_BUCKETS if np.any(labels == b)]
    raise ValueError(f"grouping must be {GLOBAL!r} or {PER_BUCKET!r}")


def ols_oracle(samples, grouping: str = GLOBAL) -> OracleResult:
    """Least-squares constant correction to ``delta_bs`` per group.

    Within each group ``c = sum((dv - delta_bs ds) ds) / sum(ds^2)`` minimizes
    ``sum((dv - (delta_bs + c) ds)^2)``.  The returned gain is measured on the
    same samples, so it is never negative.  It is NaN when ``delta_bs``
    already hedges every sample exactly (zero benchmark SSE).
    """
    if len(samples.dv) == 0:
        raise EmptyPartitionError("oracle needs at least one sample")
    labels, groups = _oracle_groups(samples, grouping)
    resid = benchmark_errors(samples)
    hedge = np.asarray(samples.delta_bs, float).copy()
    corrections = {}
    for g in groups:
        mask = labels == g
        ds = samples.ds[mask]
        denom = float(np.dot(ds, ds))
        if denom == 0.0:
            raise DegenerateGroupError(f"group {g!r} has no spot variation")
        c = float(np.dot(resid[mask], ds)) / denom
        corrections[g] = c
        hedge[mask] += c
    try:
        gain = gain_ratio(hedge, samples)
    except DegenerateBenchmarkError:
        gain = np.nan
    return OracleResult(grouping, corrections, gain, hedge)


def apply_oracle(result: OracleResult, samples) -> np.ndarray:
    """Hedge ratios from previously fitted corrections (groups not seen in the fit get 0)."""
    labels, _ = _oracle_groups(samples, result.grouping)
    corr = np.array([result.corrections.get(g, 0.0) for g in labels], float)
    return np.asarray(samples.delta_bs, float) + corr


# -- rendering ----------------------------------------------------------------

def _fmt_bucket(b) -> str:
    return f"{b:.1f}" if isinstance(b, float) else str(b)


def render_table(reports: list, by: str = "delta", digits: int = 4) -> str:
    """Aligned text table: buckets as rows, one column per report, overall row last.

    Cells from buckets with fewer than 30 samples carry a trailing ``*``.
    """
    if by not in ("delta", "ttm"):
        raise ValueError("by must be 'delta' or 'ttm'")
    order = DELTA_BUCKETS if by == "delta" else TTM_BUCKETS
    attr = "per_bucket" if by == "delta" else "per_ttm"
    rows = [b for b in order if any(b in getattr(r, attr) for r in reports)]
    header = ["Delta" if by == "delta" else "TTM"] + [r.model_name for r in reports]
    body = []
    flagged = False
    for b in rows:
        line = [_fmt_bucket(b)]
        for r in reports:
            g = getattr(r, attr).get(b)
            if g is None:
                line.append("-")
            else:
                cell = "nan" if np.isnan(g.gain) else f"{g.gain:.{digits}f}"
                if g.low_count:
                    cell += "*"
                    flagged = True
                line.append(cell)
        body.append(line)
    body.append(["Overall"] + [f"{r.overall_gain:.{digits}f}" for r in reports])
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    fmt = lambda row: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]
    if flagged:
        lines.append(f"* fewer than {LOW_COUNT} samples")
    return "\n".join(lines) + "\n"


def report_frame(reports: list) -> pd.DataFrame:
    """Long-format table of every gain with its SSEs and count."""
    rows = []
    for r in reports:
        rows.append([r.model_name, r.horizon_days, "overall", "all", r.count, r.overall_gain,
                     r.model_sse, r.benchmark_sse, r.count < LOW_COUNT])
        for kind, groups in (("delta", r.per_bucket), ("ttm", r.per_ttm)):
            for b, g in groups.items():
                rows.append([r.model_name, r.horizon_days, kind, _fmt_bucket(b), g.count, g.gain,
                             g.model_sse, g.benchmark_sse, g.low_count])
    return pd.DataFrame(rows, columns=["model", "horizon_days", "group_type", "group", "count", "gain",
                                       "model_sse", "benchmark_sse", "low_count"])


def write_report_csv(reports: list, path) -> Path:
    path = Path(path)
    report_frame(reports).to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_report_text(reports: list, path) -> Path:
    path = Path(path)
    text = render_table(reports, "delta") + "\n" + render_table(reports, "ttm")
    path.write_text(text)
    return path
