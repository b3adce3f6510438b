"""Daily top-k / drop-n portfolio simulation of a cross-sectional signal.

Each day the stocks are ranked by signal, best first, ties broken by symbol
order. The portfolio aims to hold the top k stocks in equal value, but may
sell at most n current holdings that left the target set (worst-ranked
leavers first) and buy at most n new entrants (best-ranked first) per day.
Fills happen at that day's close; each side pays cost_bps of traded
notional; positions are fractional. Days where the whole signal
cross-section is missing trade nothing and are flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .panel import PanelData


@dataclass
class BacktestConfig:
    top_k: int = 50
    drop_n: int = 5
    cost_bps: float = 0.0
    initial_worth: float = 1.0

    def __post_init__(self):
        if self.top_k < 1 or not 1 <= self.drop_n <= self.top_k:
            raise ValueError(f"need 1 <= drop_n <= top_k, got k={self.top_k} n={self.drop_n}")
        if self.cost_bps < 0.0 or self.initial_worth <= 0.0:
            raise ValueError("cost_bps must be >= 0 and initial_worth > 0")


@dataclass
class Trade:
    date: str
    symbol: str
    side: str  # "buy" or "sell"
    shares: float
    price: float
    notional: float
    cost: float


@dataclass
class BacktestReport:
    dates: list[str]
    net_worth: np.ndarray       # length len(dates) + 1; [0] is initial worth
    pre_trade_worth: np.ndarray  # worth each day before that day's trades
    daily_turnover: np.ndarray
    daily_cost: np.ndarray
    trades: list[Trade]
    flagged_days: list[str]     # all-missing signal, portfolio held as-is
    config: BacktestConfig
    final_positions: dict[str, float] = field(default_factory=dict)

    @property
    def final_worth(self) -> float:
        return float(self.net_worth[-1])


def run_topk_dropn(panel: PanelData, signal: np.ndarray, day_range: tuple[int, int],
                   config: BacktestConfig | None = None) -> BacktestReport:
    """Simulate the strategy over panel days [lo, hi].

    signal rows align with the day range (row 0 is day lo). Closing prices
    on the range must be complete. The accounting identity
    post-trade worth == pre-trade worth - transaction costs
    holds every day because fills at the close move value between cash and
    stock at the marking price.
    """
    config = config or BacktestConfig()
    lo, hi = day_range
    days = hi - lo + 1
    if config.top_k > panel.num_stocks:
        raise DataError(f"top_k {config.top_k} exceeds the {panel.num_stocks}-stock universe")
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape != (days, panel.num_stocks):
        raise ValueError(f"signal shape {signal.shape} vs expected ({days}, {panel.num_stocks})")
    closes = panel.feature("close")[lo : hi + 1]
    if not np.isfinite(closes).all():
        raise DataError("missing close price inside the backtest range")

    fee = config.cost_bps * 1e-4
    cash = config.initial_worth
    shares = np.zeros(panel.num_stocks)
    net_worth = [config.initial_worth]
    pre_worth = np.zeros(days)
    turnover = np.zeros(days)
    daily_cost = np.zeros(days)
    trades: list[Trade] = []
    flagged: list[str] = []

    for d in range(days):
        date = panel.dates[lo + d]
        price = closes[d]
        worth_pre = cash + float(shares @ price)
        pre_worth[d] = worth_pre
        row = signal[d]
        valid = np.isfinite(row)

        if not valid.any():
            flagged.append(date)
            net_worth.append(cash + float(shares @ price))
            continue

        # Rank best -> worst: higher signal first, symbol order breaks ties.
        sort_key = np.where(valid, -row, np.inf)
        order = np.lexsort((np.arange(panel.num_stocks), sort_key))
        ranked = order[valid[order]]
        target = set(ranked[: config.top_k].tolist())
        held = set(np.nonzero(shares > 0.0)[0].tolist())

        rank_pos = {stock: pos for pos, stock in enumerate(order)}
        leavers = sorted(held - target, key=lambda s: rank_pos[s], reverse=True)
        sells = leavers[: config.drop_n]
        entrants = sorted(target - held, key=lambda s: rank_pos[s])
        buys = entrants[: config.drop_n]

        traded_notional = 0.0
        costs = 0.0
        for stock in sells:
            notional = float(shares[stock] * price[stock])
            cost = notional * fee
            cash += notional - cost
            trades.append(Trade(date, panel.symbols[stock], "sell",
                                float(shares[stock]), float(price[stock]), notional, cost))
            shares[stock] = 0.0
            traded_notional += notional
            costs += cost

        worth_after_sells = cash + float(shares @ price)
        # Tranche sized by k, not by the current holding count: warm-up days
        # must leave cash for the entrants still to come on later days.
        per_position = worth_after_sells / config.top_k
        for stock in buys:
            notional = min(per_position, cash / (1.0 + fee))
            if notional <= 0.0:
                continue
            bought = notional / price[stock]
            cost = notional * fee
            cash -= notional + cost
            shares[stock] += bought
            trades.append(Trade(date, panel.symbols[stock], "buy",
                                float(bought), float(price[stock]), notional, cost))
            traded_notional += notional
            costs += cost

        turnover[d] = traded_notional / worth_pre if worth_pre > 0.0 else 0.0
        daily_cost[d] = costs
        net_worth.append(cash + float(shares @ price))

    positions = {
        panel.symbols[i]: float(shares[i])
        for i in np.nonzero(shares > 0.0)[0]
    }
    return BacktestReport(
        dates=[panel.dates[lo + d] for d in range(days)],
        net_worth=np.asarray(net_worth),
        pre_trade_worth=pre_worth,
        daily_turnover=turnover,
        daily_cost=daily_cost,
        trades=trades,
        flagged_days=flagged,
        config=config,
        final_positions=positions,
    )


def max_drawdown(net_worth: np.ndarray) -> float:
    """Largest peak-to-trough decline of a worth series, as a fraction."""
    worth = np.asarray(net_worth, dtype=np.float64)
    peaks = np.maximum.accumulate(worth)
    return float((1.0 - worth / peaks).max())


TRADING_DAYS_PER_YEAR = 252


def summarize(report: BacktestReport) -> dict:
    days = len(report.dates)
    initial = float(report.net_worth[0])
    final = report.final_worth
    total_return = final / initial - 1.0
    annualized = (final / initial) ** (TRADING_DAYS_PER_YEAR / days) - 1.0 if days else 0.0
    return {
        "days": days,
        "final_worth": final,
        "total_return": total_return,
        "annualized_return": annualized,
        "max_drawdown": max_drawdown(report.net_worth),
        "mean_daily_turnover": float(report.daily_turnover.mean()) if days else 0.0,
        "total_cost": float(report.daily_cost.sum()),
        "num_trades": len(report.trades),
        "flagged_days": len(report.flagged_days),
    }


def report_to_csv_rows(report: BacktestReport):
    """Yield (date, net_worth, turnover) rows, one per backtest day."""
    for d, date in enumerate(report.dates):
        yield date, float(report.net_worth[d + 1]), float(report.daily_turnover[d])
