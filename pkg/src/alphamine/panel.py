"""Dense panel container for daily stock features, plus CSV IO and targets."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

# Raw feature columns, in the fixed order used by the features tensor.
FEATURE_NAMES = ("open", "close", "high", "low", "volume", "vwap")
CSV_HEADER = ("date", "symbol") + FEATURE_NAMES

DEFAULT_HORIZON = 20


@dataclass
class TargetSpec:
    """How the prediction target is derived from prices."""

    horizon: int = DEFAULT_HORIZON

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")


@dataclass
class PanelData:
    """Daily feature panel over a fixed stock universe.

    features has shape (days, stocks, len(FEATURE_NAMES)) with NaN for
    missing cells. target has shape (days, stocks); it is NaN where
    undefined (for return targets, the final `horizon` days).
    """

    dates: list[str]
    symbols: list[str]
    features: np.ndarray
    target: np.ndarray | None = field(default=None)

    def __post_init__(self):
        t, n = len(self.dates), len(self.symbols)
        if self.features.shape != (t, n, len(FEATURE_NAMES)):
            raise DataError(
                f"features shape {self.features.shape} does not match "
                f"({t}, {n}, {len(FEATURE_NAMES)})"
            )
        if self.target is not None and self.target.shape != (t, n):
            raise DataError(f"target shape {self.target.shape} does not match ({t}, {n})")
        if len(set(self.dates)) != t:
            raise DataError("duplicate dates")
        if len(set(self.symbols)) != n:
            raise DataError("duplicate symbols")
        if list(self.dates) != sorted(self.dates):
            raise DataError("dates must be ascending")

    @property
    def num_days(self) -> int:
        return len(self.dates)

    @property
    def num_stocks(self) -> int:
        return len(self.symbols)

    def feature(self, name: str) -> np.ndarray:
        """(days, stocks) view of one raw feature."""
        if name not in FEATURE_NAMES:
            raise KeyError(f"unknown feature {name!r}; have {FEATURE_NAMES}")
        return self.features[:, :, FEATURE_NAMES.index(name)]


def load_csv(path: str) -> PanelData:
    """Load a panel from CSV with header date,symbol,open,close,high,low,volume,vwap.

    The stock universe is the set of symbols seen anywhere in the file,
    sorted; dates are sorted ascending. (date, symbol) pairs absent from
    the file are missing, as are empty feature fields.

    Raises:
        DataError: wrong header, malformed row (reported with its line
            number), or a duplicate (date, symbol) pair.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(CSV_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            date, symbol = row[0].strip(), row[1].strip()
            if not date or not symbol:
                raise DataError(f"{path}:{lineno}: empty date or symbol")
            values = []
            for name, cell in zip(FEATURE_NAMES, row[2:]):
                cell = cell.strip()
                if not cell:
                    values.append(np.nan)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad {name} value {cell!r}") from None
            rows.append((date, symbol, values, lineno))

    dates = sorted({r[0] for r in rows})
    symbols = sorted({r[1] for r in rows})
    date_idx = {d: i for i, d in enumerate(dates)}
    sym_idx = {s: i for i, s in enumerate(symbols)}
    features = np.full((len(dates), len(symbols), len(FEATURE_NAMES)), np.nan)
    seen = set()
    for date, symbol, values, lineno in rows:
        key = (date, symbol)
        if key in seen:
            raise DataError(f"{path}:{lineno}: duplicate row for {key}")
        seen.add(key)
        features[date_idx[date], sym_idx[symbol]] = values
    return PanelData(dates=dates, symbols=symbols, features=features)


def write_csv(panel: PanelData, path: str) -> None:
    """Write a panel in the load_csv schema. NaN cells become empty fields."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for t, date in enumerate(panel.dates):
            for s, symbol in enumerate(panel.symbols):
                cells = panel.features[t, s]
                if not np.isfinite(cells).any():
                    continue
                writer.writerow(
                    [date, symbol]
                    + [_format_cell(x) for x in cells]
                )


def _format_cell(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def compute_target(panel: PanelData, spec: TargetSpec | None = None) -> np.ndarray:
    """Forward return target: close[t+h] / close[t] - 1 per stock.

    The final h days have no defined target and come back NaN, as does any
    day where either close is missing.

    Raises:
        DataError: a non-missing close is zero or negative.
    """
    spec = spec or TargetSpec()
    close = panel.feature("close")
    finite = np.isfinite(close)
    if (close[finite] <= 0.0).any():
        raise DataError("non-positive close price")
    h = spec.horizon
    target = np.full(close.shape, np.nan)
    if h < panel.num_days:
        target[:-h] = close[h:] / close[:-h] - 1.0
    return target
