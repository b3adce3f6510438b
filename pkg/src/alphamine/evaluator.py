"""Evaluate expression trees over a panel, one value per (day, stock).

Time-series operators read trailing windows of exactly t days including the
current day; a day whose window extends past the start of the panel (or
contains a missing value) yields a missing value, never a shorter window.
Non-finite results (log of a non-positive value, division by zero, zero
variance correlations) become missing, and missing operands propagate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dsl import ConstantNode, Expression, FeatureNode, OperatorNode
from .panel import PanelData

DEFAULT_MIN_VALID_FRACTION = 0.8


@dataclass
class AlphaMatrix:
    """Expression values on a day range: shape (days, stocks), NaN missing."""

    values: np.ndarray
    day_range: tuple[int, int]  # inclusive panel day indices

    @property
    def num_days(self) -> int:
        return self.values.shape[0]

    @property
    def valid_fraction(self) -> float:
        return float(np.isfinite(self.values).mean())

    @property
    def valid_day_count(self) -> int:
        """Days usable for a cross-sectional IC: at least two finite values
        and not constant across the finite ones."""
        finite = np.isfinite(self.values)
        count = finite.sum(axis=1)
        vmax = np.where(finite, self.values, -np.inf).max(axis=1)
        vmin = np.where(finite, self.values, np.inf).min(axis=1)
        return int(((count >= 2) & (vmax > vmin)).sum())


def evaluate(expr, panel: PanelData, day_range: tuple[int, int] | None = None) -> AlphaMatrix:
    """Evaluate an Expression (or bare node) over panel days [lo, hi].

    History before lo is used to fill trailing windows, so a window is only
    missing when it reaches past the start of the panel itself.
    """
    root = expr.root if isinstance(expr, Expression) else expr
    lo, hi = day_range if day_range is not None else (0, panel.num_days - 1)
    if not (0 <= lo <= hi <= panel.num_days - 1):
        raise ValueError(f"day range ({lo}, {hi}) outside panel of {panel.num_days} days")
    full = _eval_node(root, panel)
    return AlphaMatrix(values=full[lo : hi + 1].copy(), day_range=(lo, hi))


@dataclass
class ValidityReport:
    valid: bool
    valid_fraction: float
    constant_days: int


def semantic_validity(matrix: AlphaMatrix,
                      min_valid_fraction: float = DEFAULT_MIN_VALID_FRACTION) -> ValidityReport:
    """Decide whether evaluated values can serve as an alpha.

    Valid means the non-missing fraction over the whole range is at least
    min_valid_fraction and no day is cross-sectionally constant over its
    non-missing values (a constant day has no defined IC).
    """
    values = matrix.values
    finite = np.isfinite(values)
    fraction = float(finite.mean()) if values.size else 0.0
    count = finite.sum(axis=1)
    vmax = np.where(finite, values, -np.inf).max(axis=1, initial=-np.inf)
    vmin = np.where(finite, values, np.inf).min(axis=1, initial=np.inf)
    constant_days = int(((count >= 1) & (vmax == vmin)).sum())
    valid = fraction >= min_valid_fraction and constant_days == 0
    return ValidityReport(valid=valid, valid_fraction=fraction, constant_days=constant_days)


def warmup_days(node) -> int:
    """Panel days consumed before the first defined value on a full panel."""
    if isinstance(node, (FeatureNode, ConstantNode)):
        return 0
    if isinstance(node, Expression):
        return warmup_days(node.root)
    inner = max(warmup_days(child) for child in node.operands)
    if node.delta is None:
        return inner
    if node.op in ("Ref", "Delta"):
        return inner + node.delta
    return inner + node.delta - 1


# ---------------------------------------------------------------------------
# Node evaluation


def _eval_node(node, panel: PanelData) -> np.ndarray:
    if isinstance(node, FeatureNode):
        return panel.feature(node.name).astype(np.float64, copy=True)
    if isinstance(node, ConstantNode):
        return np.full((panel.num_days, panel.num_stocks), float(node.value))
    if not isinstance(node, OperatorNode):
        raise TypeError(f"cannot evaluate {node!r}")
    args = [_eval_node(child, panel) for child in node.operands]
    fn = _OPERATOR_IMPLS[node.op]
    if node.delta is None:
        out = fn(*args)
    else:
        out = fn(*args, node.delta)
    return _clean(out)


def _clean(values: np.ndarray) -> np.ndarray:
    return np.where(np.isfinite(values), values, np.nan)


def _windows(x: np.ndarray, t: int) -> np.ndarray:
    """(days, stocks) -> (days, stocks, t) trailing windows; short head is NaN."""
    days = x.shape[0]
    out = np.full(x.shape + (t,), np.nan)
    if days >= t:
        out[t - 1 :] = sliding_window_view(x, t, axis=0)
    return out


def _ref(x, t):
    out = np.full_like(x, np.nan)
    if t < x.shape[0]:
        out[t:] = x[:-t]
    return out


def _wma(x, t):
    weights = np.arange(1, t + 1, dtype=np.float64)
    weights /= weights.sum()
    return _windows(x, t) @ weights


def _ema(x, t):
    # Recursive smoothing across the window, seeded with its first value,
    # collapses to fixed per-position weights.
    alpha = 2.0 / (t + 1.0)
    weights = np.empty(t)
    weights[0] = (1.0 - alpha) ** (t - 1)
    for j in range(1, t):
        weights[j] = alpha * (1.0 - alpha) ** (t - 1 - j)
    return _windows(x, t) @ weights


def _cov(x, y, t):
    wx = _windows(x, t)
    wy = _windows(y, t)
    dx = wx - wx.mean(axis=-1, keepdims=True)
    dy = wy - wy.mean(axis=-1, keepdims=True)
    return (dx * dy).mean(axis=-1)


def _corr(x, y, t):
    wx = _windows(x, t)
    wy = _windows(y, t)
    dx = wx - wx.mean(axis=-1, keepdims=True)
    dy = wy - wy.mean(axis=-1, keepdims=True)
    cov = (dx * dy).mean(axis=-1)
    sx = np.sqrt((dx * dx).mean(axis=-1))
    sy = np.sqrt((dy * dy).mean(axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        return cov / (sx * sy)


def _log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(x)


def _div(x, y):
    with np.errstate(divide="ignore", invalid="ignore"):
        return x / y


_OPERATOR_IMPLS = {
    "Abs": np.abs,
    "Log": _log,
    "Add": lambda x, y: x + y,
    "Sub": lambda x, y: x - y,
    "Mul": lambda x, y: x * y,
    "Div": _div,
    "Greater": np.maximum,
    "Less": np.minimum,
    "Ref": _ref,
    "Mean": lambda x, t: _windows(x, t).mean(axis=-1),
    "Med": lambda x, t: np.median(_windows(x, t), axis=-1),
    "Sum": lambda x, t: _windows(x, t).sum(axis=-1),
    "Std": lambda x, t: _windows(x, t).std(axis=-1),
    "Var": lambda x, t: _windows(x, t).var(axis=-1),
    "Max": lambda x, t: _windows(x, t).max(axis=-1),
    "Min": lambda x, t: _windows(x, t).min(axis=-1),
    "Mad": lambda x, t: _mad(x, t),
    "Delta": lambda x, t: x - _ref(x, t),
    "WMA": _wma,
    "EMA": _ema,
    "Cov": _cov,
    "Corr": _corr,
}


def _mad(x, t):
    w = _windows(x, t)
    return np.abs(w - w.mean(axis=-1, keepdims=True)).mean(axis=-1)
