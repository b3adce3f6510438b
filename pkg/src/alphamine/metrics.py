"""Cross-sectional normalization and information-coefficient metrics.

All functions operate on one trading day's cross-section (a vector with one
entry per stock) or on day-by-stock matrices. Missing values are NaN. Pairs
with a missing entry on either side are dropped before correlating; a day is
degenerate when fewer than two complete pairs remain or when either side is
constant over the complete pairs.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateVectorError

# Smallest number of complete (u, v) pairs that still defines a correlation.
MIN_COMPLETE_PAIRS = 2


def normalize_cross_section(values: np.ndarray) -> np.ndarray:
    """Center a cross-section and scale it to unit Euclidean length.

    The output u satisfies sum(u) == 0 and ||u|| == 1, which makes the
    Pearson correlation of two normalized vectors equal to their inner
    product and fixes the variance of a length-n vector at 1/n.

    NaN entries are preserved in place; the mean and norm are taken over
    the non-missing entries only.

    Raises:
        DegenerateVectorError: fewer than two non-missing entries, or the
            non-missing entries are constant.
    """
    values = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(values)
    if finite.sum() < MIN_COMPLETE_PAIRS:
        raise DegenerateVectorError(
            f"need at least {MIN_COMPLETE_PAIRS} observations, got {int(finite.sum())}"
        )
    centered = values - values[finite].mean()
    norm = np.sqrt(np.nansum(np.where(finite, centered * centered, 0.0)))
    if norm == 0.0:
        raise DegenerateVectorError("cross-section is constant")
    out = np.where(finite, centered / norm, np.nan)
    return out


def daily_ic(values: np.ndarray, target: np.ndarray) -> float:
    """Pearson correlation between one day's alpha values and its target.

    Entries missing on either side are dropped pairwise first.

    Raises:
        DegenerateVectorError: fewer than two complete pairs, or either
            side constant over the complete pairs.
    """
    u = np.asarray(values, dtype=np.float64)
    v = np.asarray(target, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    ok = np.isfinite(u) & np.isfinite(v)
    if ok.sum() < MIN_COMPLETE_PAIRS:
        raise DegenerateVectorError("fewer than two complete pairs")
    u = u[ok]
    v = v[ok]
    du = u - u.mean()
    dv = v - v.mean()
    nu = np.sqrt(du @ du)
    nv = np.sqrt(dv @ dv)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("constant side in complete pairs")
    return float((du @ dv) / (nu * nv))


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks of a vector, ties receiving the mean of spanned ranks.

    r((3, -2, 6, 4)) == (2, 1, 4, 3) and r((3, -2, 4, 4)) == (2, 1, 3.5, 3.5).
    NaN entries stay NaN and do not consume ranks.
    """
    values = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(values)
    out = np.full(values.shape, np.nan)
    if finite.any():
        out[finite] = rankdata(values[finite], method="average")
    return out


def rank_ic(values: np.ndarray, target: np.ndarray) -> float:
    """Rank information coefficient: Pearson correlation of average ranks.

    Both sides are rank-transformed over their pairwise-complete entries,
    then passed through daily_ic.
    """
    u = np.asarray(values, dtype=np.float64)
    v = np.asarray(target, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    ok = np.isfinite(u) & np.isfinite(v)
    if ok.sum() < MIN_COMPLETE_PAIRS:
        raise DegenerateVectorError("fewer than two complete pairs")
    return daily_ic(average_ranks(u[ok]), average_ranks(v[ok]))


def mean_ic(values: np.ndarray, target: np.ndarray, rank: bool = False) -> float:
    """Mean daily IC of a (days, stocks) value matrix against a target matrix.

    Degenerate days (too few complete pairs, or a constant side) are
    excluded from the mean rather than treated as zero.

    Raises:
        DegenerateVectorError: no day in the range yields a defined IC.
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if values.shape != target.shape:
        raise ValueError(f"shape mismatch {values.shape} vs {target.shape}")
    if rank:
        ics = []
        for day in range(values.shape[0]):
            try:
                ics.append(rank_ic(values[day], target[day]))
            except DegenerateVectorError:
                continue
        if not ics:
            raise DegenerateVectorError("no valid day in range")
        return float(np.mean(ics))
    return float(np.mean(_daily_ic_rows(values, target)))


def _daily_ic_rows(values: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Vectorized per-day Pearson ICs of two (days, stocks) matrices.

    Returns the ICs of non-degenerate days only. Used on the hot path of
    pool updates, where a Python loop over days is too slow.
    """
    ok = np.isfinite(values) & np.isfinite(target)
    u = np.where(ok, values, 0.0)
    v = np.where(ok, target, 0.0)
    count = ok.sum(axis=1)
    # Guard divisions; days with count < 2 are dropped at the end.
    safe = np.maximum(count, 1)
    mu = u.sum(axis=1) / safe
    mv = v.sum(axis=1) / safe
    du = np.where(ok, u - mu[:, None], 0.0)
    dv = np.where(ok, v - mv[:, None], 0.0)
    nu = np.sqrt((du * du).sum(axis=1))
    nv = np.sqrt((dv * dv).sum(axis=1))
    defined = (count >= MIN_COMPLETE_PAIRS) & (nu > 0.0) & (nv > 0.0)
    if not defined.any():
        raise DegenerateVectorError("no valid day in range")
    cov = (du * dv).sum(axis=1)
    return cov[defined] / (nu[defined] * nv[defined])


def normalize_matrix(values: np.ndarray) -> np.ndarray:
    """Apply normalize_cross_section to every row of a (days, stocks) matrix.

    Rows that are degenerate (all-missing, under two observations, or
    constant) come back all-NaN instead of raising, so callers can carry
    warm-up days through and let mean_ic skip them.
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    finite = np.isfinite(values)
    count = finite.sum(axis=1)
    safe = np.maximum(count, 1)
    mu = np.where(finite, values, 0.0).sum(axis=1) / safe
    centered = np.where(finite, values - mu[:, None], 0.0)
    norm = np.sqrt((centered * centered).sum(axis=1))
    good = (count >= MIN_COMPLETE_PAIRS) & (norm > 0.0)
    out = np.full(values.shape, np.nan)
    rows = np.nonzero(good)[0]
    out[rows] = centered[rows] / norm[rows, None]
    out[~finite] = np.nan
    return out
