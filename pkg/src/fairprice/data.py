"""Quote portfolio ingestion: CSV loading, encoding, splitting and caching."""
from __future__ import annotations

import hashlib
import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

SPLITS = ("train", "dev", "test")
DEFAULT_RATIOS = (0.6, 0.2, 0.2)
UNSEEN = "__unseen__"
CACHE_VERSION = 1


class ConfigurationError(ValueError):
    """Invalid mapping, ratios or missing inputs."""


@dataclass
class ColumnMapping:
    feature_columns: list[str]
    sale_column: str
    price_column: str
    premium_column: str | None = None
    sensitive_columns: list[tuple[str, str]] = field(default_factory=list)
    categorical_columns: list[str] = field(default_factory=list)
    id_column: str | None = None

    def __post_init__(self):
        self.feature_columns = list(self.feature_columns)
        self.sensitive_columns = [(str(n), str(k)) for n, k in self.sensitive_columns]
        self.categorical_columns = list(self.categorical_columns)
        self.validate()

    def validate(self):
        sensitive = {name for name, _ in self.sensitive_columns}
        if sensitive & set(self.feature_columns):
            raise ConfigurationError(
                f"sensitive columns cannot be features: {sorted(sensitive & set(self.feature_columns))}")
        for name, kind in self.sensitive_columns:
            if kind not in ("binary", "continuous"):
                raise ConfigurationError(f"sensitive column {name!r}: kind must be binary or continuous")
        extra = set(self.categorical_columns) - set(self.feature_columns)
        if extra:
            raise ConfigurationError(f"categorical columns not among features: {sorted(extra)}")
        if self.id_column is not None and self.id_column in self.feature_columns:
            raise ConfigurationError(f"id column {self.id_column!r} cannot be a feature")

    @property
    def sensitive_names(self) -> list[str]:
        return [name for name, _ in self.sensitive_columns]

    def required_columns(self) -> list[str]:
        cols = [*self.feature_columns, self.sale_column, self.price_column, *self.sensitive_names]
        if self.premium_column:
            cols.append(self.premium_column)
        return cols

    def to_dict(self) -> dict:
        return {
            "feature_columns": self.feature_columns,
            "sale_column": self.sale_column,
            "price_column": self.price_column,
            "premium_column": self.premium_column,
            "sensitive_columns": [list(p) for p in self.sensitive_columns],
            "categorical_columns": self.categorical_columns,
            "id_column": self.id_column,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnMapping":
        known = {"feature_columns", "sale_column", "price_column", "premium_column",
                 "sensitive_columns", "categorical_columns", "id_column"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown mapping keys: {sorted(unknown)}")
        for key in ("feature_columns", "sale_column", "price_column"):
            if key not in d:
                raise ConfigurationError(f"mapping is missing {key!r}")
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class PortfolioRecord:
    x: np.ndarray
    s: np.ndarray
    y: int
    price_hist: float
    h: float


@dataclass
class PreprocessReport:
    n_rows: int = 0
    n_loaded: int = 0
    rejections: Counter = field(default_factory=Counter)
    rejected_rows: list[tuple[int, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "n_loaded": self.n_loaded,
            "rejections": dict(self.rejections),
            "rejected_rows": [list(r) for r in self.rejected_rows],
        }


@dataclass
class SplitAssignment:
    seed: int
    ratios: tuple[float, float, float]
    assignment: np.ndarray  # int8 codes indexing SPLITS

    def indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.assignment == SPLITS.index(name))

    def sizes(self) -> tuple[int, int, int]:
        return tuple(int(np.sum(self.assignment == k)) for k in range(3))


def split(records, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitAssignment:
    """Deterministic train/dev/test partition of ``records`` (or a count)."""
    n = records if isinstance(records, (int, np.integer)) else len(records)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigurationError(f"split ratios must be three positive fractions, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must sum to 1, got {sum(ratios):.6g}")
    n_train = int(round(n * ratios[0]))
    n_dev = int(round(n * ratios[1]))
    n_dev = min(n_dev, n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    assignment = np.full(n, 2, dtype=np.int8)
    assignment[order[:n_train]] = 0
    assignment[order[n_train:n_train + n_dev]] = 1
    return SplitAssignment(int(seed), ratios, assignment)


def log_price(price):
    """Natural log of a strictly positive price (scalar or array)."""
    arr = np.asarray(price, dtype=np.float64)
    if np.any(arr <= 0) or np.any(np.isnan(arr)):
        raise ValueError("log_price needs strictly positive prices")
    out = np.log(arr)
    return float(out) if out.ndim == 0 else out


@dataclass
class Encoder:
    """Frozen feature encoding: z-scored numerics, one-hot categoricals."""

    numeric_columns: list[str]
    means: list[float]
    stds: list[float]
    categorical_levels: dict[str, list[str]]

    @classmethod
    def fit(cls, frame: pd.DataFrame, mapping: ColumnMapping) -> "Encoder":
        numeric = [c for c in mapping.feature_columns if c not in mapping.categorical_columns]
        values = frame[numeric].to_numpy(dtype=np.float64) if numeric else np.empty((len(frame), 0))
        means = values.mean(axis=0) if len(frame) else np.zeros(len(numeric))
        stds = values.std(axis=0) if len(frame) else np.ones(len(numeric))
        stds = np.where(stds > 0, stds, 1.0)
        levels = {c: sorted(frame[c].astype(str).unique().tolist()) for c in mapping.categorical_columns}
        return cls(numeric, means.tolist(), stds.tolist(), levels)

    @property
    def feature_names(self) -> list[str]:
        names = list(self.numeric_columns)
        for col, levels in self.categorical_levels.items():
            names += [f"{col}={lv}" for lv in levels] + [f"{col}={UNSEEN}"]
        return names

    def transform(self, frame: pd.DataFrame) -> np.ndarray:
        n = len(frame)
        blocks = []
        if self.numeric_columns:
            values = frame[self.numeric_columns].to_numpy(dtype=np.float64)
            blocks.append((values - np.asarray(self.means)) / np.asarray(self.stds))
        for col, levels in self.categorical_levels.items():
            lookup = {lv: i for i, lv in enumerate(levels)}
            codes = np.array([lookup.get(v, len(levels)) for v in frame[col].astype(str)], dtype=np.int64)
            onehot = np.zeros((n, len(levels) + 1))
            onehot[np.arange(n), codes] = 1.0
            blocks.append(onehot)
        return np.hstack(blocks) if blocks else np.zeros((n, 0))

    def to_dict(self) -> dict:
        return {"numeric_columns": self.numeric_columns, "means": self.means, "stds": self.stds,
                "categorical_levels": self.categorical_levels}

    @classmethod
    def from_dict(cls, d: dict) -> "Encoder":
        return cls(d["numeric_columns"], d["means"], d["stds"], d["categorical_levels"])


@dataclass
class Portfolio:
    """Column-oriented view of a set of quote records."""

    X: np.ndarray
    y: np.ndarray
    price: np.ndarray
    premium: np.ndarray | None = None
    sensitive: np.ndarray | None = None
    feature_names: list[str] = field(default_factory=list)
    sensitive_names: list[str] = field(default_factory=list)
    split: SplitAssignment | None = None
    split_name: str | None = None
    encoder: Encoder | None = None

    def __len__(self):
        return len(self.y)

    def subset(self, idx: np.ndarray, split_name: str | None = None) -> "Portfolio":
        return Portfolio(
            X=self.X[idx], y=self.y[idx], price=self.price[idx],
            premium=None if self.premium is None else self.premium[idx],
            sensitive=None if self.sensitive is None else self.sensitive[idx],
            feature_names=self.feature_names, sensitive_names=self.sensitive_names,
            split=None, split_name=split_name,
        )

    def part(self, name: str) -> "Portfolio":
        if self.split is None:
            raise ConfigurationError("portfolio has no split assignment")
        return self.subset(self.split.indices(name), split_name=name)

    def records(self, premium: np.ndarray | None = None):
        h = self.premium if premium is None else premium
        if h is None:
            raise ConfigurationError("records need a premium column or fitted premium")
        s = self.sensitive if self.sensitive is not None else np.zeros((len(self), 0))
        for i in range(len(self)):
            yield PortfolioRecord(self.X[i], s[i], int(self.y[i]), float(self.price[i]), float(h[i]))

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for arr in (self.X, self.y, self.price, self.premium, self.sensitive):
            if arr is not None:
                digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        if self.split is not None:
            digest.update(self.split.assignment.tobytes())
        return digest.hexdigest()[:16]


def audit_sensitive_exclusion(feature_names, mapping: ColumnMapping):
    """Raise if any encoded feature column derives from a sensitive column."""
    for name in feature_names:
        base = name.split("=", 1)[0]
        if base in mapping.sensitive_names:
            raise ConfigurationError(f"encoded feature {name!r} derives from sensitive column {base!r}")


def _reject_reasons(frame: pd.DataFrame, mapping: ColumnMapping) -> pd.Series:
    used = mapping.required_columns()
    reasons = pd.Series("", index=frame.index, dtype=object)

    def flag(mask, reason):
        fresh = mask & (reasons == "")
        reasons[fresh] = reason

    flag((frame[used].apply(lambda c: c.str.strip()) == "").any(axis=1), "missing value")
    numeric = [c for c in used if c not in mapping.categorical_columns]
    parsed = frame[numeric].apply(pd.to_numeric, errors="coerce")
    flag(parsed.isna().any(axis=1), "unparseable cell")
    flag(~parsed[mapping.sale_column].isin([0, 1]), "invalid sale label")
    flag(parsed[mapping.price_column] <= 0, "non-positive price")
    if mapping.premium_column:
        flag(parsed[mapping.premium_column] <= 0, "non-positive premium")
    for name, kind in mapping.sensitive_columns:
        if kind == "binary":
            flag(~parsed[name].isin([0, 1]), "invalid binary sensitive value")
    return reasons


def load_portfolio(csv_path, mapping: ColumnMapping, ratios=DEFAULT_RATIOS,
                   seed: int = 0) -> tuple[Portfolio, PreprocessReport]:
    """Read, validate, split and encode a quote CSV.

    Rows failing validation are counted in the report instead of loaded.
    Encoding statistics come from the train split only.
    """
    frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    header = set(frame.columns)
    for col in mapping.required_columns() + ([mapping.id_column] if mapping.id_column else []):
        if col not in header:
            raise ConfigurationError(f"column {col!r} not found in {csv_path}")
    if mapping.id_column:
        frame = frame.drop(columns=[mapping.id_column])

    report = PreprocessReport(n_rows=len(frame))
    reasons = _reject_reasons(frame, mapping)
    bad = reasons != ""
    report.rejections = Counter(reasons[bad].tolist())
    # +2: one for the header line, one for 1-based numbering
    report.rejected_rows = [(int(i) + 2, r) for i, r in reasons[bad].items()]
    frame = frame[~bad].reset_index(drop=True)
    report.n_loaded = len(frame)

    numeric = [c for c in mapping.required_columns() if c not in mapping.categorical_columns]
    frame[numeric] = frame[numeric].apply(pd.to_numeric)
    assignment = split(len(frame), ratios, seed)
    encoder = Encoder.fit(frame.iloc[assignment.indices("train")], mapping)
    X = encoder.transform(frame)
    audit_sensitive_exclusion(encoder.feature_names, mapping)

    portfolio = Portfolio(
        X=X,
        y=frame[mapping.sale_column].to_numpy(dtype=np.float64),
        price=frame[mapping.price_column].to_numpy(dtype=np.float64),
        premium=frame[mapping.premium_column].to_numpy(dtype=np.float64) if mapping.premium_column else None,
        sensitive=(frame[mapping.sensitive_names].to_numpy(dtype=np.float64)
                   if mapping.sensitive_columns else None),
        feature_names=encoder.feature_names,
        sensitive_names=mapping.sensitive_names,
        split=assignment,
        encoder=encoder,
    )
    return portfolio, report


# Cache layout (little-endian): uint8 version, uint32 d, uint32 n, then n*d
# float64 values row-major. Columns: encoded features, sale, price, premium
# (NaN when absent), sensitive values, split code. Column names and encoder
# state live in the JSON sidecar ``<path>.json``.

def save_cache(portfolio: Portfolio, path, meta: dict | None = None) -> None:
    n = len(portfolio)
    premium = portfolio.premium if portfolio.premium is not None else np.full(n, np.nan)
    sensitive = portfolio.sensitive if portfolio.sensitive is not None else np.zeros((n, 0))
    codes = (portfolio.split.assignment.astype(np.float64) if portfolio.split is not None
             else np.full(n, np.nan))
    table = np.column_stack([portfolio.X, portfolio.y, portfolio.price, premium, sensitive, codes])
    table = np.ascontiguousarray(table, dtype="<f8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<BII", CACHE_VERSION, table.shape[1], n))
        fh.write(table.tobytes(order="C"))
    sidecar = {
        "version": CACHE_VERSION,
        "feature_names": portfolio.feature_names,
        "sensitive_names": portfolio.sensitive_names,
        "has_premium": portfolio.premium is not None,
        "split_seed": portfolio.split.seed if portfolio.split is not None else None,
        "split_ratios": list(portfolio.split.ratios) if portfolio.split is not None else None,
        "fingerprint": portfolio.fingerprint(),
        **(meta or {}),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_cache(path) -> Portfolio:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"portfolio cache {path} not found; run ingest first")
    raw = path.read_bytes()
    version, d, n = struct.unpack_from("<BII", raw)
    if version != CACHE_VERSION:
        raise ConfigurationError(f"unsupported cache version {version}")
    table = np.frombuffer(raw, dtype="<f8", offset=struct.calcsize("<BII")).reshape(n, d).copy()
    meta = json.loads(Path(str(path) + ".json").read_text())
    nf, ns = len(meta["feature_names"]), len(meta["sensitive_names"])
    col = nf
    X = table[:, :nf]
    y, price, premium = table[:, col], table[:, col + 1], table[:, col + 2]
    sensitive = table[:, col + 3:col + 3 + ns] if ns else None
    codes = table[:, -1]
    assignment = None
    if meta["split_seed"] is not None:
        assignment = SplitAssignment(meta["split_seed"], tuple(meta["split_ratios"]), codes.astype(np.int8))
    return Portfolio(X=X, y=y, price=price, premium=premium if meta["has_premium"] else None,
                     sensitive=sensitive, feature_names=meta["feature_names"],
                     sensitive_names=meta["sensitive_names"], split=assignment)
