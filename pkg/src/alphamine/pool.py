"""Linearly weighted alpha pool trained against a normalized target.

The pool keeps every member's per-day normalized value matrix plus two IC
caches: each member's mean IC against the target and the pairwise mean ICs
between members. Because all vectors are centered and unit length per day,
the mean squared error of the combination against the target is, up to the
1/n factor, a quadratic form in the weights with those cached ICs as
coefficients. Weight fitting runs plain gradient descent on that quadratic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import dsl
from .errors import DegenerateVectorError, EmptyPoolError, OptimizationError
from .metrics import mean_ic, normalize_matrix

CHECKPOINT_VERSION = 1

# Initial weight of a freshly added alpha is drawn uniformly from this range.
INIT_WEIGHT_SCALE = 0.01

# Tiny L2 penalty stabilizing the optimized quadratic when members are nearly
# collinear. It is never part of the reported loss or its gradient.
RIDGE = 1e-6


@dataclass
class GdConfig:
    steps: int = 1000
    learning_rate: float = 5e-2
    stop_tolerance: float = 1e-6

    def __post_init__(self):
        if self.steps < 0 or self.learning_rate <= 0.0 or self.stop_tolerance < 0.0:
            raise ValueError(f"bad gradient-descent config {self}")


def combine(matrices, weights) -> np.ndarray:
    """Weighted sum of value matrices; cells missing in any member are
    missing in the output."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(matrices) == 0:
        raise EmptyPoolError("no alphas to combine")
    if len(matrices) != len(weights):
        raise ValueError(f"{len(matrices)} matrices vs {len(weights)} weights")
    stacked = np.stack(matrices)
    missing = ~np.isfinite(stacked)
    out = np.tensordot(weights, np.where(missing, 0.0, stacked), axes=1)
    out[missing.any(axis=0)] = np.nan
    return out


class AlphaPool:
    """Capacity-bounded set of alphas combined by learned linear weights.

    target is the normalized (days, stocks) target matrix on the training
    range. objective is the mean daily IC of the weighted combination
    against that target; it is 0.0 while the pool is empty.
    """

    def __init__(self, target: np.ndarray, capacity: int,
                 gd_config: GdConfig | None = None, seed: int = 0):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.target = np.asarray(target, dtype=np.float64)
        if self.target.ndim != 2:
            raise ValueError(f"target must be (days, stocks), got {self.target.shape}")
        self.capacity = capacity
        self.gd_config = gd_config or GdConfig()
        self.expressions: list[dsl.Expression] = []
        self.matrices: list[np.ndarray] = []
        self.weights = np.zeros(0)
        self.single_ic = np.zeros(0)
        self.mutual_ic = np.zeros((0, 0))
        self.objective = 0.0
        self.num_stocks = self.target.shape[1]
        self._rng = np.random.default_rng(seed)
        self._rpn_index: set[tuple] = set()
        # Cached ICs are inner products of zero-padded normalized values over
        # the full day range, so the mutual matrix is a true Gram matrix and
        # the quadratic loss stays bounded below. Averaging each pair over
        # its own valid-day subset instead makes the matrix indefinite once
        # members miss different days, and gradient descent then chases an
        # unbounded descent direction.
        self._target_padded = np.nan_to_num(normalize_matrix(self.target))
        self._padded: list[np.ndarray] = []

    @property
    def size(self) -> int:
        return len(self.expressions)

    def contains(self, rpn: tuple) -> bool:
        return rpn in self._rpn_index

    # -- quadratic loss ------------------------------------------------------

    def loss(self, weights: np.ndarray | None = None) -> float:
        """Mean squared error of the combination, expressed through cached
        ICs: (1/n) (1 - 2 w.s + w.M.w) with s the single ICs and M the
        mutual ICs. At w = 0 this is 1/n; a perfect fit drives it to 0.
        """
        w = self.weights if weights is None else np.asarray(weights, dtype=np.float64)
        self._check_len(w)
        n = self.num_stocks
        return float((1.0 - 2.0 * w @ self.single_ic + w @ self.mutual_ic @ w) / n)

    def loss_gradient(self, weights: np.ndarray | None = None) -> np.ndarray:
        """Exact gradient of loss(): (1/n) (-2 s + 2 M w)."""
        w = self.weights if weights is None else np.asarray(weights, dtype=np.float64)
        self._check_len(w)
        return (-2.0 * self.single_ic + 2.0 * self.mutual_ic @ w) / self.num_stocks

    def _check_len(self, w: np.ndarray) -> None:
        if w.shape != (self.size,):
            raise ValueError(f"expected {self.size} weights, got shape {w.shape}")

    def optimize_weights(self, config: GdConfig | None = None) -> np.ndarray:
        """Gradient descent on the ridge-stabilized quadratic.

        Stops early when the gradient infinity norm falls under
        stop_tolerance. Returns (and installs) the best weights seen as
        measured by the reported loss, so the result never scores worse
        than the entry weights.
        """
        cfg = config or self.gd_config
        if self.size == 0:
            raise EmptyPoolError("no weights to optimize")
        w = self.weights.copy()
        best_w = w.copy()
        best_loss = self.loss(w)
        for _ in range(cfg.steps):
            grad = self.loss_gradient(w) + 2.0 * RIDGE * w
            if not np.isfinite(grad).all():
                raise OptimizationError("non-finite gradient")
            if np.abs(grad).max() < cfg.stop_tolerance:
                break
            w = w - cfg.learning_rate * grad
            if not np.isfinite(w).all():
                raise OptimizationError("weights diverged")
            cur = self.loss(w)
            if cur < best_loss:
                best_loss = cur
                best_w = w.copy()
        self.weights = best_w
        return self.weights

    # -- membership ----------------------------------------------------------

    def add_alpha(self, expr: dsl.Expression, matrix: np.ndarray,
                  config: GdConfig | None = None) -> bool:
        """Add one alpha (per-day normalized value matrix) and refit weights.

        Returns False and leaves the pool untouched when the expression is
        already a member. Otherwise the alpha enters with a small random
        weight, weights are re-optimized, and if the pool then exceeds
        capacity the member with the smallest absolute weight is evicted
        (caches included). self.objective is updated last.

        The refit is committed only if it does not lower the objective
        relative to keeping the old weights and ignoring the newcomer, so
        an added alpha can never hurt the pre-eviction objective.
        """
        if expr.rpn in self._rpn_index:
            return False
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != self.target.shape:
            raise ValueError(f"matrix shape {matrix.shape} vs target {self.target.shape}")

        entry_weights = self.weights
        self.expressions.append(expr)
        self.matrices.append(matrix)
        self._rpn_index.add(expr.rpn)
        self.weights = np.append(entry_weights, self._rng.uniform(-INIT_WEIGHT_SCALE, INIT_WEIGHT_SCALE))
        self._extend_ic_caches(matrix)

        baseline_w = np.append(entry_weights, 0.0)
        baseline = self._objective_for(baseline_w) if self.size > 1 else None
        self.optimize_weights(config)
        candidate = self._objective_for(self.weights)
        if baseline is not None and candidate < baseline:
            self.weights = baseline_w
            candidate = baseline

        while self.size > self.capacity:
            self._evict(int(np.argmin(np.abs(self.weights))))
            candidate = self._objective_for(self.weights)
        self.objective = candidate
        return True

    def _extend_ic_caches(self, matrix: np.ndarray) -> None:
        k = self.size
        days = self.target.shape[0]
        padded = np.nan_to_num(matrix)
        new_single = float((padded * self._target_padded).sum()) / days
        cross = np.array([float((padded * p).sum()) for p in self._padded]) / days
        mutual = np.empty((k, k))
        mutual[: k - 1, : k - 1] = self.mutual_ic
        mutual[k - 1, : k - 1] = cross
        mutual[: k - 1, k - 1] = cross
        mutual[k - 1, k - 1] = float((padded * padded).sum()) / days
        self._padded.append(padded)
        self.single_ic = np.append(self.single_ic, new_single)
        self.mutual_ic = mutual

    def _evict(self, index: int) -> None:
        self._rpn_index.discard(self.expressions[index].rpn)
        del self.expressions[index]
        del self.matrices[index]
        del self._padded[index]
        self.weights = np.delete(self.weights, index)
        self.single_ic = np.delete(self.single_ic, index)
        self.mutual_ic = np.delete(np.delete(self.mutual_ic, index, axis=0), index, axis=1)

    def combined_values(self, weights: np.ndarray | None = None) -> np.ndarray:
        """Weighted combination of member matrices on the training range."""
        if self.size == 0:
            raise EmptyPoolError("empty pool has no combined values")
        return combine(self.matrices, self.weights if weights is None else weights)

    def _objective_for(self, weights: np.ndarray) -> float:
        try:
            return mean_ic(combine(self.matrices, weights), self.target)
        except DegenerateVectorError:
            return 0.0

    # -- checkpointing ---------------------------------------------------------

    def to_json(self) -> str:
        payload = {
            "version": CHECKPOINT_VERSION,
            "capacity": self.capacity,
            "objective": self.objective,
            "alphas": [
                {"expression": e.to_infix(), "weight": float(w)}
                for e, w in zip(self.expressions, self.weights)
            ],
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str, panel, day_range: tuple[int, int],
                  target: np.ndarray, gd_config: GdConfig | None = None,
                  seed: int = 0) -> "AlphaPool":
        """Rebuild a pool from to_json output on the same panel.

        Expressions are re-parsed from their infix form and re-evaluated;
        weights and objective are restored exactly as stored.
        """
        from .evaluator import evaluate
        from .metrics import normalize_matrix

        payload = json.loads(text)
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
        pool = cls(target=target, capacity=payload["capacity"], gd_config=gd_config, seed=seed)
        for item in payload["alphas"]:
            expr = dsl.parse_infix(item["expression"])
            matrix = normalize_matrix(evaluate(expr, panel, day_range).values)
            pool.expressions.append(expr)
            pool.matrices.append(matrix)
            pool._rpn_index.add(expr.rpn)
            pool.weights = np.append(pool.weights, float(item["weight"]))
            pool._extend_ic_caches(matrix)
        pool.objective = float(payload["objective"])
        return pool
