"""Seeded synthetic market panels with a planted cross-sectional target.

Prices follow a geometric random walk with a common per-day factor shock
(so cross-sections move together but not in lockstep), volumes are
autocorrelated lognormals, and vwap sits inside the day's range. The
prediction target on each day is the per-day normalized value of
    sum_i weight_i * N(f_i(X_t)) + r * ||signal_t|| * N(noise_t)
where the f_i are planted formula alphas, N is the per-day center-and-scale
normalization, and r is the noise-to-signal ratio, so r = 1 means the
injected noise has exactly the norm of the planted signal every day.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsl
from .errors import GenerationError
from .evaluator import evaluate
from .metrics import normalize_matrix
from .panel import FEATURE_NAMES, PanelData

DEFAULT_PLANTED = (
    ("Div(Mean($close,10),$close)", 0.6),
    ("Div($volume,Mean($volume,20))", 0.4),
)


@dataclass
class SynthSpec:
    seed: int = 0
    num_stocks: int = 50
    num_days: int = 750
    planted: list[tuple[dsl.Expression, float]] = field(default_factory=list)
    noise_to_signal: float = 1.0
    burn_in: int = 120
    start_date: str = "2015-01-05"

    def __post_init__(self):
        if self.num_stocks < 2 or self.num_days < 1 or self.burn_in < 0:
            raise ValueError("need num_stocks >= 2, num_days >= 1, burn_in >= 0")
        if self.noise_to_signal < 0.0:
            raise ValueError("noise_to_signal must be >= 0")


def default_planted() -> list[tuple[dsl.Expression, float]]:
    return [(dsl.parse_infix(text), weight) for text, weight in DEFAULT_PLANTED]


def synth_generate(spec: SynthSpec) -> PanelData:
    """Build a panel whose target is planted from spec.planted.

    The price process runs spec.burn_in extra leading days that are
    dropped from the output, so planted expressions with trailing windows
    are fully warmed up on every emitted day and the target has no missing
    values.

    Raises:
        GenerationError: a planted expression is missing or degenerate on
            some emitted day (burn_in too small, or the expression is
            constant cross-sectionally).
    """
    planted = spec.planted or default_planted()
    rng = np.random.default_rng(spec.seed)
    n, days = spec.num_stocks, spec.num_days
    total = spec.burn_in + days

    features = _price_panel(rng, total, n)
    all_dates = np.datetime_as_string(
        np.busday_offset(np.datetime64(spec.start_date, "D"), np.arange(total), roll="forward")
    ).tolist()
    symbols = [f"S{i:04d}" for i in range(n)]
    full = PanelData(dates=all_dates, symbols=symbols, features=features)

    signal = np.zeros((days, n))
    for expr, weight in planted:
        values = evaluate(expr, full, (spec.burn_in, total - 1)).values
        bad = ~np.isfinite(values)
        if bad.any():
            raise GenerationError(
                f"planted alpha {expr.to_infix()} is missing on "
                f"{int(bad.any(axis=1).sum())} emitted days; raise burn_in"
            )
        rows = normalize_matrix(values)
        if not np.isfinite(rows).all():
            raise GenerationError(
                f"planted alpha {expr.to_infix()} is cross-sectionally constant on some day"
            )
        signal += weight * rows

    signal_norm = np.sqrt((signal * signal).sum(axis=1, keepdims=True))
    if (signal_norm == 0.0).any():
        raise GenerationError("planted combination vanished on some day")
    noise = normalize_matrix(rng.standard_normal((days, n)))
    raw_target = signal + spec.noise_to_signal * signal_norm * noise
    target = normalize_matrix(raw_target)
    if not np.isfinite(target).all():
        raise GenerationError("degenerate target day")

    return PanelData(
        dates=all_dates[spec.burn_in :],
        symbols=symbols,
        features=features[spec.burn_in :],
        target=target,
    )


def _price_panel(rng: np.random.Generator, total: int, n: int) -> np.ndarray:
    drift = 0.0002
    factor = rng.normal(0.0, 0.01, size=(total, 1))
    loadings = rng.uniform(0.5, 1.5, size=(1, n))
    idio = rng.normal(0.0, 0.02, size=(total, n))
    log_close = np.log(rng.uniform(20.0, 200.0, size=(1, n))) + np.cumsum(
        drift + factor * loadings + idio, axis=0
    )
    close = np.exp(log_close)
    open_ = close * np.exp(rng.normal(0.0, 0.005, size=(total, n)))
    high = np.maximum(open_, close) * np.exp(np.abs(rng.normal(0.0, 0.006, size=(total, n))))
    low = np.minimum(open_, close) * np.exp(-np.abs(rng.normal(0.0, 0.006, size=(total, n))))
    vwap = low + rng.uniform(0.0, 1.0, size=(total, n)) * (high - low)

    vol_mean = 13.0
    vol_log = np.empty((total, n))
    vol_log[0] = vol_mean + rng.normal(0.0, 0.5, size=n)
    shocks = rng.normal(0.0, 0.5, size=(total, n))
    for t in range(1, total):
        vol_log[t] = vol_mean + 0.8 * (vol_log[t - 1] - vol_mean) + shocks[t]
    volume = np.exp(vol_log)

    features = np.empty((total, n, len(FEATURE_NAMES)))
    for idx, name in enumerate(FEATURE_NAMES):
        features[:, :, idx] = {
            "open": open_, "close": close, "high": high,
            "low": low, "volume": volume, "vwap": vwap,
        }[name]
    return features


def write_target_csv(panel: PanelData, path: str) -> None:
    """Persist the planted target as date,symbol,target rows."""
    import csv

    if panel.target is None:
        raise ValueError("panel has no target to write")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "symbol", "target"])
        for t, date in enumerate(panel.dates):
            for s, symbol in enumerate(panel.symbols):
                value = panel.target[t, s]
                writer.writerow([date, symbol, "" if not np.isfinite(value) else repr(float(value))])


def load_target_csv(path: str, panel: PanelData) -> np.ndarray:
    """Load a target written by write_target_csv, aligned to panel axes.

    Cells absent from the file stay NaN; rows for unknown (date, symbol)
    pairs are an error.
    """
    import csv

    from .errors import DataError

    date_idx = {d: i for i, d in enumerate(panel.dates)}
    sym_idx = {s: i for i, s in enumerate(panel.symbols)}
    target = np.full((panel.num_days, panel.num_stocks), np.nan)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["date", "symbol", "target"]:
            raise DataError(f"{path}: expected header date,symbol,target")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields")
            date, symbol, cell = row[0].strip(), row[1].strip(), row[2].strip()
            if date not in date_idx or symbol not in sym_idx:
                raise DataError(f"{path}:{lineno}: unknown (date, symbol) ({date}, {symbol})")
            if cell:
                target[date_idx[date], sym_idx[symbol]] = float(cell)
    return target
