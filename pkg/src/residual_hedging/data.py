"""Quote ingestion, filtering, hedge-sample construction, features and splits.

Moneyness is ``spot / strike`` throughout.  Horizons count trading days
(1 = daily, 5 = weekly, 21 = monthly) and year fractions are ACT/365.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from . import bs
from .errors import (BucketRangeError, EmptyPartitionError, MalformedFileError,
                     SpecMismatchError, UnitMismatchError)
from .market import CALENDAR_DAYS, QUOTE_COLUMNS, MarketPanel

GREEK_COLUMNS = ["implied_vol", "delta_bs", "gamma_bs", "vega_bs", "theta_bs"]
MANDATORY_COLUMNS = ["date_index", "contract_id", "kind", "spot", "strike", "ttm_days", "mid", *GREEK_COLUMNS]
OPTIONAL_COLUMNS = ["vix_proxy", "index_return"]

FEATURE_SETS = {
    "Fea2": ["ttm", "delta_bs"],
    "Fea3": ["ttm", "delta_bs", "moneyness"],
    "Fea4": ["ttm", "delta_bs", "moneyness", "implied_vol"],
    "Fea5": ["ttm", "delta_bs", "moneyness", "implied_vol", "theta_bs"],
    "Fea6": ["ttm", "delta_bs", "moneyness", "implied_vol", "theta_bs", "vega_bs"],
    "Fea7": ["ttm", "delta_bs", "moneyness", "implied_vol", "theta_bs", "vega_bs", "gamma_bs"],
    # market sentiment: the VIX proxy for calls, the previous-day index return for puts
    "Fea3-CL": ["ttm", "delta_bs", "sentiment"],
}

TTM_BUCKETS = ["0-1m", "1-3m", "3-6m", "6m-1y", "1-2y", ">2y"]
_TTM_EDGES = np.array([1 / 12, 3 / 12, 6 / 12, 1.0, 2.0])
DELTA_BUCKETS = [round(k / 10, 1) for k in range(-9, 0)] + [round(k / 10, 1) for k in range(1, 10)]

FLOAT_FORMAT = "%.17g"


# -- ingestion -----------------------------------------------------------------

@dataclass
class IngestResult:
    quotes: pd.DataFrame
    dropped: dict = field(default_factory=lambda: {"missing": 0, "untraded": 0})

    def __len__(self):
        return len(self.quotes)


def write_quotes_csv(quotes, path) -> Path:
    """Write quotes (a DataFrame or a :class:`MarketPanel`) in the canonical CSV layout."""
    if isinstance(quotes, MarketPanel):
        quotes = quotes.quotes
    path = Path(path)
    quotes[QUOTE_COLUMNS].to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def ingest_csv(path, schema_map: Optional[Mapping[str, str]] = None, *, rate: float = 0.0,
               unit_check: bool = True, unit_tolerance: float = 1e-3) -> IngestResult:
    """Read a quote CSV into the canonical layout.

    ``schema_map`` maps canonical column names to the file's column names.
    Files without a ``mid`` column may supply ``bid`` and ``ask`` instead,
    and then ``mid = (bid + ask) / 2``.  A ``volume`` column, if mapped,
    marks rows with zero volume as untraded; those are dropped.  Rows missing
    any mandatory field are dropped as well.  Both drop counts are returned.

    With ``unit_check`` each row's implied vol must reprice its mid within
    ``unit_tolerance`` (relative), using the flat ``rate``.  Otherwise a
    :class:`UnitMismatchError` is raised, which usually means the vendor
    quotes vol in percent or the Greeks in other units.
    """
    path = Path(path)
    schema_map = dict(schema_map or {})
    try:
        if path.stat().st_size == 0:
            return IngestResult(pd.DataFrame({c: pd.Series(dtype=_dtype(c)) for c in QUOTE_COLUMNS}))
        raw = pd.read_csv(path, dtype={schema_map.get("contract_id", "contract_id"): str,
                                       schema_map.get("kind", "kind"): str},
                          float_precision="round_trip")
    except (pd.errors.ParserError, UnicodeDecodeError, pd.errors.EmptyDataError) as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc

    def col(name):
        src = schema_map.get(name, name)
        return raw[src] if src in raw.columns else None

    data = {}
    for name in QUOTE_COLUMNS:
        series = col(name)
        if series is None and name == "mid":
            bid, ask = col("bid"), col("ask")
            if bid is not None and ask is not None:
                series = 0.5 * (pd.to_numeric(bid, errors="coerce") + pd.to_numeric(ask, errors="coerce"))
        if series is None:
            if name in OPTIONAL_COLUMNS:
                series = pd.Series(np.nan, index=raw.index)
            else:
                raise MalformedFileError(f"{path}: no column for mandatory field {name!r}")
        data[name] = series
    df = pd.DataFrame(data)
    for name in QUOTE_COLUMNS:
        if name not in ("contract_id", "kind"):
            df[name] = pd.to_numeric(df[name], errors="coerce").astype(float)
    df["kind"] = df["kind"].str.strip().str.lower()
    df.loc[~df["kind"].isin([bs.CALL, bs.PUT]), "kind"] = np.nan

    dropped = {"missing": 0, "untraded": 0}
    volume = col("volume")
    if volume is not None:
        untraded = pd.to_numeric(volume, errors="coerce").fillna(0).to_numpy() == 0
        dropped["untraded"] = int(untraded.sum())
        df = df[~untraded]
    missing = df[MANDATORY_COLUMNS].isna().any(axis=1).to_numpy()
    dropped["missing"] = int(missing.sum())
    df = df[~missing].reset_index(drop=True)
    df["date_index"] = df["date_index"].astype(np.int64)

    if unit_check and len(df):
        repriced = bs.bs_price(df["spot"].to_numpy(), df["strike"].to_numpy(),
                               df["ttm_days"].to_numpy() / CALENDAR_DAYS, rate,
                               df["implied_vol"].to_numpy(), df["kind"].to_numpy())
        mid = df["mid"].to_numpy()
        bad = np.abs(repriced - mid) > unit_tolerance * np.abs(mid)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise UnitMismatchError(
                f"{path}: implied vol {df['implied_vol'].iat[i]!r} reprices to {repriced[i]!r}, "
                f"quoted mid {mid[i]!r} ({int(bad.sum())} rows fail); check vol/Greek units")
    return IngestResult(df[QUOTE_COLUMNS], dropped)


def _dtype(name):
    if name in ("contract_id", "kind"):
        return object
    return np.int64 if name == "date_index" else float


# -- filters -------------------------------------------------------------------

@dataclass(frozen=True)
class FilterPolicy:
    min_ttm_days: float = 14
    call_delta_range: tuple = (0.05, 0.95)
    put_delta_range: tuple = (-0.95, -0.05)
    require_fields: tuple = tuple(MANDATORY_COLUMNS)

    def __post_init__(self):
        for lo, hi in (self.call_delta_range, self.put_delta_range):
            if not -1.0 <= lo <= hi <= 1.0:
                raise ValueError("delta ranges must be ordered and within [-1, 1]")
        if self.min_ttm_days < 0:
            raise ValueError("min_ttm_days must be non-negative")


def apply_filters(quotes: pd.DataFrame, policy: FilterPolicy = FilterPolicy()) -> pd.DataFrame:
    """Keep quotes with ttm >= the minimum and delta inside the closed range for their kind."""
    fields = [f for f in policy.require_fields if f in quotes.columns]
    keep = quotes[fields].notna().all(axis=1).to_numpy()
    keep &= quotes["ttm_days"].to_numpy() >= policy.min_ttm_days
    delta = quotes["delta_bs"].to_numpy()
    is_call = quotes["kind"].to_numpy() == bs.CALL
    (clo, chi), (plo, phi) = policy.call_delta_range, policy.put_delta_range
    keep &= np.where(is_call, (delta >= clo) & (delta <= chi), (delta >= plo) & (delta <= phi))
    return quotes[keep].reset_index(drop=True)


# -- buckets -------------------------------------------------------------------

def _delta_tenths(delta):
    delta = np.asarray(delta, float)
    valid = (np.abs(delta) >= 0.05 - 1e-12) & (np.abs(delta) <= 0.95 + 1e-12)
    if not np.all(valid):
        bad = delta[~valid].ravel()[0]
        raise BucketRangeError(f"delta {bad!r} outside the bucketed range [-0.95, -0.05] U [0.05, 0.95]")
    # [d - 0.05, d + 0.05) on the signed axis; rounding to 9 places removes binary noise at edges
    tenths = np.floor(np.round(delta * 10 + 0.5, 9)).astype(int)
    # filter-inclusive endpoints 0.95 and -0.05 fall just outside the outer buckets
    return np.clip(np.where(tenths == 0, -1, tenths), -9, 9)


def assign_delta_bucket(delta_bs):
    """Delta bucket ``d`` in {+-0.1, ..., +-0.9} with ``delta_bs`` in ``[d - 0.05, d + 0.05)``.

    The two filter-inclusive endpoints 0.95 and -0.05 go to 0.9 and -0.1.
    """
    out = np.round(_delta_tenths(delta_bs) / 10.0, 1)
    return float(out) if out.ndim == 0 else out


def assign_ttm_bucket(ttm):
    """Maturity category for a year-fraction ttm; edges at 1, 3, 6 months, 1 and 2 years, lower-inclusive."""
    # rounding keeps e.g. 21 trading days (exactly one month) out of the bucket below
    idx = np.searchsorted(np.round(_TTM_EDGES, 12), np.round(np.asarray(ttm, float), 12), side="right")
    labels = np.asarray(TTM_BUCKETS, dtype=object)[idx]
    return labels if np.ndim(labels) else str(labels)


# -- samples -------------------------------------------------------------------

@dataclass(frozen=True)
class HedgeSample:
    dv: float
    ds: float
    delta_bs: float
    features: np.ndarray
    bucket: float
    ttm_bucket: str
    date_index: int


@dataclass
class SampleSet:
    """Column-oriented collection of hedge samples for one feature model and horizon."""
    model_name: str
    horizon_days: int
    columns: list
    dv: np.ndarray
    ds: np.ndarray
    delta_bs: np.ndarray
    features: np.ndarray
    bucket: np.ndarray
    ttm_bucket: np.ndarray
    date_index: np.ndarray
    kind: np.ndarray
    contract_id: np.ndarray
    quotes: Optional[pd.DataFrame] = None   # start-of-period quote rows, aligned

    def __len__(self):
        return len(self.dv)

    def __getitem__(self, i) -> HedgeSample:
        return HedgeSample(float(self.dv[i]), float(self.ds[i]), float(self.delta_bs[i]),
                           self.features[i].copy(), float(self.bucket[i]), str(self.ttm_bucket[i]),
                           int(self.date_index[i]))

    def subset(self, index) -> "SampleSet":
        index = np.asarray(index)
        quotes = None if self.quotes is None else self.quotes.iloc[
            np.flatnonzero(index) if index.dtype == bool else index].reset_index(drop=True)
        return SampleSet(self.model_name, self.horizon_days, list(self.columns), self.dv[index],
                         self.ds[index], self.delta_bs[index], self.features[index], self.bucket[index],
                         self.ttm_bucket[index], self.date_index[index], self.kind[index],
                         self.contract_id[index], quotes)

    def to_frame(self) -> pd.DataFrame:
        if self.quotes is not None:
            df = self.quotes[QUOTE_COLUMNS].reset_index(drop=True).copy()
        else:
            df = pd.DataFrame({"date_index": self.date_index, "contract_id": self.contract_id,
                               "kind": self.kind, "delta_bs": self.delta_bs})
        df["horizon_days"] = self.horizon_days
        df["dv"] = self.dv
        df["ds"] = self.ds
        df["bucket"] = self.bucket
        df["ttm_bucket"] = self.ttm_bucket
        for j, name in enumerate(self.columns):
            df[f"f_{name}"] = self.features[:, j]
        return df


def feature_matrix(quotes: pd.DataFrame, model_name: str) -> np.ndarray:
    """Raw (unnormalized) features for ``model_name`` from start-of-period quote rows."""
    if model_name not in FEATURE_SETS:
        raise SpecMismatchError(f"unknown feature model {model_name!r}; choose from {sorted(FEATURE_SETS)}")
    cols = []
    for name in FEATURE_SETS[model_name]:
        if name == "ttm":
            cols.append(quotes["ttm_days"].to_numpy() / CALENDAR_DAYS)
        elif name == "moneyness":
            cols.append(quotes["spot"].to_numpy() / quotes["strike"].to_numpy())
        elif name == "sentiment":
            is_call = quotes["kind"].to_numpy() == bs.CALL
            cols.append(np.where(is_call, quotes["vix_proxy"].to_numpy(), quotes["index_return"].to_numpy()))
        else:
            cols.append(quotes[name].to_numpy())
    return np.column_stack(cols).astype(float) if cols else np.empty((len(quotes), 0))


def snapshots_from_quotes(quotes: pd.DataFrame) -> pd.DataFrame:
    """Per-day underlier state recovered from canonical quote rows."""
    snap = quotes.groupby("date_index", sort=True)[["spot", "vix_proxy", "index_return"]].first()
    return snap.reset_index()


def build_hedge_samples(quotes: pd.DataFrame, horizon_days: int, model_name: str,
                        snapshots: Optional[pd.DataFrame] = None, *,
                        forward_quotes: Optional[pd.DataFrame] = None) -> tuple[SampleSet, int]:
    """Pair each quote at day t with the same contract at day t + horizon.

    ``dv`` is the mid change and ``ds`` the spot change over the horizon.
    ``delta_bs`` and the features come from day t.  ``forward_quotes`` is
    where the day-(t + h) observation is looked up.  It defaults to
    ``quotes`` but is normally the unfiltered panel, so that contracts which
    leave the filter range are still marked to market.  Returns the samples
    and the number of quotes skipped for lack of a forward observation.
    """
    if horizon_days < 1:
        raise ValueError("horizon_days must be a positive number of trading days")
    if snapshots is None:
        snapshots = snapshots_from_quotes(quotes if forward_quotes is None else forward_quotes)
    fwd = quotes if forward_quotes is None else forward_quotes
    spot_by_day = pd.Series(snapshots["spot"].to_numpy(), index=snapshots["date_index"].to_numpy())
    start = quotes.reset_index(drop=True)
    target = fwd[["contract_id", "date_index", "mid"]].rename(columns={"mid": "mid_fwd"})
    keyed = start[["contract_id", "date_index"]].assign(fwd_day=start["date_index"] + horizon_days)
    merged = keyed.merge(target, left_on=["contract_id", "fwd_day"], right_on=["contract_id", "date_index"],
                         how="left", suffixes=("", "_fwd"), validate="many_to_one")
    has_fwd = merged["mid_fwd"].notna().to_numpy()
    spot_fwd = spot_by_day.reindex(keyed["fwd_day"].to_numpy()).to_numpy()
    has_fwd &= np.isfinite(spot_fwd)
    skipped = int((~has_fwd).sum())

    q = start[has_fwd].reset_index(drop=True)
    # ensure every emitted sample has its day-t underlier state from the snapshot table
    spot_now = spot_by_day.reindex(q["date_index"].to_numpy()).to_numpy()
    dv = merged["mid_fwd"].to_numpy()[has_fwd] - q["mid"].to_numpy()
    ds = spot_fwd[has_fwd] - spot_now
    features = feature_matrix(q, model_name)
    finite = np.all(np.isfinite(features), axis=1) & np.isfinite(dv) & np.isfinite(ds)
    skipped += int((~finite).sum())
    q, dv, ds, features = q[finite].reset_index(drop=True), dv[finite], ds[finite], features[finite]
    delta = q["delta_bs"].to_numpy()
    samples = SampleSet(
        model_name=model_name, horizon_days=int(horizon_days), columns=list(FEATURE_SETS[model_name]),
        dv=dv, ds=ds, delta_bs=delta, features=features, bucket=assign_delta_bucket(delta),
        ttm_bucket=assign_ttm_bucket(q["ttm_days"].to_numpy() / CALENDAR_DAYS),
        date_index=q["date_index"].to_numpy().astype(np.int64), kind=q["kind"].to_numpy().astype(object),
        contract_id=q["contract_id"].to_numpy().astype(object), quotes=q)
    return samples, skipped


def write_samples_csv(samples: SampleSet, path) -> Path:
    path = Path(path)
    samples.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_samples_csv(path) -> SampleSet:
    """Load a sample CSV written by :func:`write_samples_csv`.

    The feature model is inferred from the ``f_*`` columns; a column set that
    matches no known model is kept under the name ``"custom"``.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={"contract_id": str, "kind": str, "ttm_bucket": str},
                         float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise MalformedFileError(f"{path}: {exc}") from exc
    required = {"date_index", "dv", "ds", "delta_bs", "bucket", "ttm_bucket", "horizon_days"}
    if not required <= set(df.columns):
        raise MalformedFileError(f"{path}: sample file lacks {sorted(required - set(df.columns))}")
    columns = [c[2:] for c in df.columns if c.startswith("f_")]
    model_name = next((m for m, cols in FEATURE_SETS.items() if cols == columns), "custom")
    horizon = int(df["horizon_days"].iat[0]) if len(df) else 0
    quotes = None
    if set(QUOTE_COLUMNS) <= set(df.columns):
        quotes = df[QUOTE_COLUMNS].astype({c: _dtype(c) for c in QUOTE_COLUMNS})
    return SampleSet(
        model_name=model_name, horizon_days=horizon, columns=columns, dv=df["dv"].to_numpy(float),
        ds=df["ds"].to_numpy(float), delta_bs=df["delta_bs"].to_numpy(float),
        features=df[[f"f_{c}" for c in columns]].to_numpy(float), bucket=df["bucket"].to_numpy(float),
        ttm_bucket=df["ttm_bucket"].to_numpy(object), date_index=df["date_index"].to_numpy(np.int64),
        kind=df["kind"].to_numpy(object) if "kind" in df else np.full(len(df), "", object),
        contract_id=df["contract_id"].to_numpy(object) if "contract_id" in df else np.full(len(df), "", object),
        quotes=quotes)


# -- features and splits -------------------------------------------------------

@dataclass
class FeatureSpec:
    """Active feature set plus z-score statistics fit on the training split."""
    model_name: str
    columns: list
    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        if self.model_name in FEATURE_SETS and list(self.columns) != FEATURE_SETS[self.model_name]:
            raise SpecMismatchError(f"columns {self.columns} do not match {self.model_name}")
        self.mean = np.asarray(self.mean, float)
        self.sd = np.asarray(self.sd, float)
        if self.mean.shape != (len(self.columns),) or self.sd.shape != (len(self.columns),):
            raise SpecMismatchError("normalization stats need one entry per column")
        if np.any(self.sd <= 0):
            raise ValueError("feature standard deviations must be positive")

    @property
    def norm_stats(self) -> dict:
        return {c: (float(m), float(s)) for c, m, s in zip(self.columns, self.mean, self.sd)}

    def check(self, samples: SampleSet):
        if list(samples.columns) != list(self.columns):
            raise SpecMismatchError(
                f"sample features {list(samples.columns)} do not match model features {list(self.columns)}")

    def transform(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, float)
        if features.ndim != 2 or features.shape[1] != len(self.columns):
            raise SpecMismatchError(
                f"expected {len(self.columns)} feature columns, got shape {features.shape}")
        return (features - self.mean) / self.sd

    def to_dict(self) -> dict:
        return {"model_name": self.model_name, "columns": list(self.columns),
                "mean": self.mean.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_dict(cls, d) -> "FeatureSpec":
        return cls(d["model_name"], list(d["columns"]), np.asarray(d["mean"], float), np.asarray(d["sd"], float))


def fit_feature_spec(train: SampleSet) -> FeatureSpec:
    """Z-score statistics from the training split.  Constant columns get sd 1 so they pass through centred."""
    mean = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return FeatureSpec(train.model_name, list(train.columns), mean, sd)


@dataclass(frozen=True)
class SplitPlan:
    train_end_date: int
    val_fraction: float = 0.2
    val_seed: int = 0
    train_start_date: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class Split:
    train: SampleSet
    val: SampleSet
    test: SampleSet


def make_split(samples: SampleSet, plan: SplitPlan) -> Split:
    """Chronological test set after ``train_end_date``; a seeded random val/train partition before it.

    ``train_start_date`` optionally drops older pre-test samples (reduced-data runs).
    Normalization statistics are fit afterwards on the train part only.
    """
    if len(samples) == 0:
        raise EmptyPartitionError("no samples to split")
    dates = samples.date_index
    test_mask = dates > plan.train_end_date
    pre = ~test_mask
    if plan.train_start_date is not None:
        pre &= dates >= plan.train_start_date
    pre_idx = np.flatnonzero(pre)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(plan.val_seed)))
    perm = rng.permutation(pre_idx.size)
    n_val = int(round(plan.val_fraction * pre_idx.size))
    val_idx = np.sort(pre_idx[perm[:n_val]])
    train_idx = np.sort(pre_idx[perm[n_val:]])
    test_idx = np.flatnonzero(test_mask)
    for name, idx in (("train", train_idx), ("validation", val_idx), ("test", test_idx)):
        if idx.size == 0:
            raise EmptyPartitionError(f"{name} partition is empty")
    return Split(samples.subset(train_idx), samples.subset(val_idx), samples.subset(test_idx))


def samples_from_panel(panel: MarketPanel, horizon_days: int, model_name: str,
                       policy: FilterPolicy = FilterPolicy(), kinds: Sequence[str] = (bs.CALL,)):
    """Filter a panel, restrict it to ``kinds`` and build samples.  Forward prices come from the unfiltered panel."""
    quotes = panel.quotes
    filtered = apply_filters(quotes[quotes["kind"].isin(list(kinds))], policy)
    return build_hedge_samples(filtered, horizon_days, model_name, panel.snapshots, forward_quotes=quotes)
