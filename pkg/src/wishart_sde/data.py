"""CSV ingestion, standardisation and train/test splitting."""

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .errors import ContractError, ParseError, SchemaError

MISSING_TOKENS = ("", "NA")


@dataclass
class TabularDataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: List[str]
    target_names: List[str]
    standardized: bool = False

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx):
        return replace(self, X=self.X[idx], y=self.y[idx])


@dataclass
class TimeSeriesDataset:
    times: np.ndarray
    Y: np.ndarray
    names: List[str]
    mask: np.ndarray = None  # True where the value was observed (not interpolated)
    standardized: bool = False

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(self.Y.shape, dtype=bool)
        if np.any(np.diff(self.times) <= 0):
            raise SchemaError("time stamps must be strictly increasing")

    def __len__(self):
        return self.Y.shape[0]

    def slice(self, start, stop):
        return replace(self, times=self.times[start:stop], Y=self.Y[start:stop],
                       mask=self.mask[start:stop])


def _read_rows(path, delimiter):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(i + 1, row) for i, row in enumerate(csv.reader(fh, delimiter=delimiter))]
    rows = [(n, r) for n, r in rows if r and not r[0].startswith("#")]
    if not rows:
        raise SchemaError(f"{path}: missing header row")
    header_line, header = rows[0]
    header = [h.strip() for h in header]
    body = rows[1:]
    if not body:
        raise SchemaError(f"{path}: dataset is empty (header only)")
    values = np.empty((len(body), len(header)))
    for k, (lineno, row) in enumerate(body):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", line=lineno)
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell in MISSING_TOKENS:
                values[k, j] = np.nan
                continue
            try:
                values[k, j] = float(cell)
            except ValueError:
                raise ParseError(f"cannot parse {cell!r} in column {header[j]!r}",
                                 line=lineno) from None
    return header, values


def _column_index(header, name):
    try:
        return header.index(name)
    except ValueError:
        raise SchemaError(f"column {name!r} not found; available: {', '.join(header)}") from None


def interpolate_missing(times, values):
    """Linearly interpolate NaNs per column; boundary gaps take the nearest value."""
    out = values.copy()
    observed = ~np.isnan(values)
    for j in range(values.shape[1]):
        ok = observed[:, j]
        if not ok.any():
            raise SchemaError(f"column {j} has no observed values")
        if not ok.all():
            out[~ok, j] = np.interp(times[~ok], times[ok], values[ok, j])
    return out, observed


def load_csv(path, targets=None, delimiter=",", time_column=None, features=None):
    """Read a tabular dataset, or a time series when ``time_column`` is given.

    Tabular rows with any missing cell are dropped (with a warning); time
    series gaps are linearly interpolated and recorded in ``mask``.
    """
    header, values = _read_rows(path, delimiter)
    for j, name in enumerate(header):
        if np.all(np.isnan(values[:, j])):
            raise SchemaError(f"column {name!r} is entirely missing")

    if time_column is not None:
        t_idx = _column_index(header, time_column)
        times = values[:, t_idx]
        if np.any(np.isnan(times)):
            raise SchemaError("time column has missing entries")
        cols = [j for j in range(len(header)) if j != t_idx]
        if targets:
            cols = [_column_index(header, t) for t in targets]
        Y, mask = interpolate_missing(times, values[:, cols])
        return TimeSeriesDataset(times=times, Y=Y, names=[header[j] for j in cols], mask=mask)

    if not targets:
        raise SchemaError("tabular data needs at least one target column")
    t_cols = [_column_index(header, t) for t in targets]
    if features:
        f_cols = [_column_index(header, f) for f in features]
    else:
        f_cols = [j for j in range(len(header)) if j not in t_cols]
    X, y = values[:, f_cols], values[:, t_cols]
    complete = ~(np.isnan(X).any(axis=1) | np.isnan(y).any(axis=1))
    if not complete.all():
        warnings.warn(f"dropping {int((~complete).sum())} rows with missing values")
        X, y = X[complete], y[complete]
    if X.shape[0] == 0:
        raise SchemaError("no complete rows")
    return TabularDataset(X=X, y=y, feature_names=[header[j] for j in f_cols],
                          target_names=[header[j] for j in t_cols])


def _fmt(v):
    return "" if math.isnan(v) else repr(float(v))


def write_csv(path, ds, delimiter=",", time_column="time"):
    """Write a dataset so that ``load_csv`` reproduces every value bitwise."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        if isinstance(ds, TimeSeriesDataset):
            w.writerow([time_column] + list(ds.names))
            for t, row in zip(ds.times, ds.Y):
                w.writerow([_fmt(t)] + [_fmt(v) for v in row])
        else:
            w.writerow(list(ds.feature_names) + list(ds.target_names))
            for xr, yr in zip(ds.X, ds.y):
                w.writerow([_fmt(v) for v in xr] + [_fmt(v) for v in yr])


@dataclass
class Standardizer:
    """Per-column affine statistics estimated on training data only."""

    x_mean: Optional[np.ndarray] = None
    x_std: Optional[np.ndarray] = None
    keep: Optional[np.ndarray] = None
    y_mean: np.ndarray = field(default=None)
    y_std: np.ndarray = field(default=None)

    @classmethod
    def fit(cls, ds):
        if isinstance(ds, TimeSeriesDataset):
            mean, std = ds.Y.mean(axis=0), ds.Y.std(axis=0)
            std = _guard_std(std, ds.names)
            return cls(y_mean=mean, y_std=std)
        x_mean, x_std = ds.X.mean(axis=0), ds.X.std(axis=0)
        keep = x_std > 0
        if not keep.all():
            dropped = [n for n, k in zip(ds.feature_names, keep) if not k]
            warnings.warn(f"dropping zero-variance feature columns: {', '.join(dropped)}")
        y_std = _guard_std(ds.y.std(axis=0), ds.target_names)
        return cls(x_mean=x_mean[keep], x_std=x_std[keep], keep=keep,
                   y_mean=ds.y.mean(axis=0), y_std=y_std)

    def transform_X(self, X):
        return (X[:, self.keep] - self.x_mean) / self.x_std

    def transform_y(self, y):
        return (y - self.y_mean) / self.y_std

    def inverse_y(self, y):
        return y * self.y_std + self.y_mean

    def inverse_y_var(self, var):
        return var * self.y_std ** 2

    def apply(self, ds):
        if isinstance(ds, TimeSeriesDataset):
            return replace(ds, Y=self.transform_y(ds.Y), standardized=True)
        names = [n for n, k in zip(ds.feature_names, self.keep) if k]
        return replace(ds, X=self.transform_X(ds.X), y=self.transform_y(ds.y),
                       feature_names=names, standardized=True)

    def invert(self, ds):
        if isinstance(ds, TimeSeriesDataset):
            return replace(ds, Y=self.inverse_y(ds.Y), standardized=False)
        if not self.keep.all():
            raise ContractError("cannot invert a standardisation that dropped columns")
        return replace(ds, X=ds.X * self.x_std + self.x_mean, y=self.inverse_y(ds.y),
                       standardized=False)

    def arrays(self):
        out = {"y_mean": self.y_mean, "y_std": self.y_std}
        if self.x_mean is not None:
            out.update(x_mean=self.x_mean, x_std=self.x_std, keep=self.keep.astype(float))
        return out

    @classmethod
    def from_arrays(cls, arrays):
        keep = arrays.get("keep")
        return cls(x_mean=arrays.get("x_mean"), x_std=arrays.get("x_std"),
                   keep=None if keep is None else keep.astype(bool),
                   y_mean=arrays["y_mean"], y_std=arrays["y_std"])


def _guard_std(std, names):
    std = np.array(std, dtype=float)
    zero = std == 0
    if zero.any():
        warnings.warn("constant columns left unscaled: "
                      + ", ".join(n for n, z in zip(names, zero) if z))
        std[zero] = 1.0
    return std


def standardize(train, test=None):
    """Standardise ``train`` (and ``test`` with the training statistics).

    Returns ``(train', test', stats)``; ``test'`` is None when no test set is given.
    """
    stats = Standardizer.fit(train)
    return stats.apply(train), (None if test is None else stats.apply(test)), stats


def split(ds, fraction=0.9, seed=0):
    """Seeded random partition into (train, test)."""
    if not 0.0 < fraction < 1.0:
        raise ContractError("fraction must lie strictly between 0 and 1")
    N = len(ds)
    n_train = int(round(N * fraction))
    if n_train < 1 or n_train >= N:
        raise ContractError(f"split of {N} rows at {fraction} leaves an empty side")
    train_idx, test_idx = split_indices(N, fraction, seed)
    return ds.subset(train_idx), ds.subset(test_idx)


def split_indices(N, fraction=0.9, seed=0):
    perm = np.random.default_rng(seed).permutation(N)
    n_train = int(round(N * fraction))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])
