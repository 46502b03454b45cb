"""Hypothetical one-share trading against market prices.

Each forecast/price pair yields one trade: buy a $1 long share at
m + 0.01 when the model's probability exceeds the price, short at
(1 - m) + 0.01 when it is below, coin-flip on exact ties.  The added
cent stands in for fees and slippage.  Three gating rules select which
trades count toward the totals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from forecast_rl.data import Dataset, split_dataset
from forecast_rl.errors import ValidationError
from forecast_rl.evaluation import Forecast, Z_95, ece_equal_mass

FEE = 0.01

GATE_EDGE_ABOVE_ECE = "edge_above_ece"
GATE_EDGE_ABOVE_ZERO = "edge_above_zero"
GATE_ALL_MARKETS = "all_markets"
GATES = (GATE_EDGE_ABOVE_ECE, GATE_EDGE_ABOVE_ZERO, GATE_ALL_MARKETS)

CONFIDENCE_BANDS = ((0.50, 0.65), (0.65, 0.80), (0.80, 1.00))


@dataclass
class TradeRecord:
    question_id: str
    side: str  # long | short
    market_price: float
    entry_cost: float
    belief_value: float
    expected_edge: float
    realized_value: int
    profit: float

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "side": self.side,
            "market_price": self.market_price,
            "entry_cost": self.entry_cost,
            "belief_value": self.belief_value,
            "expected_edge": self.expected_edge,
            "realized_value": self.realized_value,
            "profit": self.profit,
        }


@dataclass
class GatingRule:
    kind: str
    ece_value: float | None = None

    def validate(self) -> None:
        if self.kind not in GATES:
            raise ValidationError(f"unknown gating rule {self.kind!r}")
        if self.kind == GATE_EDGE_ABOVE_ECE:
            if self.ece_value is None or not (0.0 <= self.ece_value <= 1.0):
                raise ValidationError("edge_above_ece needs ece_value in [0, 1]")

    def keeps(self, trade: TradeRecord) -> bool:
        if self.kind == GATE_ALL_MARKETS:
            return True
        if self.kind == GATE_EDGE_ABOVE_ZERO:
            return trade.expected_edge > 0.0
        return trade.expected_edge > self.ece_value


@dataclass
class StrategyResult:
    """Kept trades in descending expected-edge order with running totals."""

    trades: list[TradeRecord]
    cumulative_profit: np.ndarray
    total_profit: float
    n_trades: int
    mean_profit: float | None = None
    mean_ci: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        return {
            "n_trades": self.n_trades,
            "total_profit": self.total_profit,
            "mean_profit": self.mean_profit,
            "mean_ci": list(self.mean_ci) if self.mean_ci is not None else None,
            "trades": [t.to_dict() for t in self.trades],
        }


@dataclass
class BandResult:
    lo: float
    hi: float
    count: int
    mean_pp: float | None
    t_stat: float | None
    p_value: float | None

    def to_dict(self) -> dict:
        return {
            "lo": self.lo,
            "hi": self.hi,
            "count": self.count,
            "mean_pp": self.mean_pp,
            "t_stat": self.t_stat,
            "p_value": self.p_value,
        }


def make_trade(p: float, m: float, y: int, rng: np.random.Generator) -> TradeRecord:
    """One hypothetical share: long above the price, short below, seeded
    coin flip on an exact tie."""
    if not (0.0 < m < 1.0):
        raise ValidationError(f"market price must lie strictly in (0, 1), got {m}")
    if not (0.0 <= p <= 1.0):
        raise ValidationError(f"probability must lie in [0, 1], got {p}")
    if y not in (0, 1):
        raise ValidationError(f"outcome must be 0 or 1, got {y}")
    if p > m:
        go_long = True
    elif p < m:
        go_long = False
    else:
        go_long = rng.random() < 0.5
    if go_long:
        side = "long"
        cost = m + FEE
        belief = p
        realized = y
    else:
        side = "short"
        cost = (1.0 - m) + FEE
        belief = 1.0 - p
        realized = 1 - y
    return TradeRecord(
        question_id="",
        side=side,
        market_price=m,
        entry_cost=cost,
        belief_value=belief,
        expected_edge=belief - cost,
        realized_value=realized,
        profit=realized - cost,
    )


def eligible(q) -> bool:
    """Tradeable: a quote exists and volume, when reported, is nonzero."""
    return q.market_price is not None and (q.volume is None or q.volume > 0)


def _probability_map(forecasts) -> dict[str, float | None]:
    if isinstance(forecasts, dict):
        return forecasts
    return {f.question_id: f.probability for f in forecasts}


def build_trades(
    forecasts, dataset: Dataset, rng: np.random.Generator
) -> list[TradeRecord]:
    """One trade per eligible question with a present forecast, in
    dataset order (tie coin flips consume the generator in that order)."""
    probs = _probability_map(forecasts)
    trades = []
    for q in dataset:
        if not eligible(q):
            continue
        p = probs.get(q.id)
        if p is None:
            continue
        t = make_trade(p, q.market_price, q.outcome, rng)
        t.question_id = q.id
        trades.append(t)
    return trades


def run_strategy(
    forecasts,
    dataset: Dataset,
    rule: GatingRule,
    rng: np.random.Generator,
) -> StrategyResult:
    """Apply one gating rule and aggregate in descending edge order."""
    rule.validate()
    trades = build_trades(forecasts, dataset, rng)
    kept = [t for t in trades if rule.keeps(t)]
    kept.sort(key=lambda t: (-t.expected_edge, t.question_id))
    profits = np.array([t.profit for t in kept])
    cumulative = np.cumsum(profits) if kept else np.empty(0)
    result = StrategyResult(
        trades=kept,
        cumulative_profit=cumulative,
        total_profit=float(profits.sum()) if kept else 0.0,
        n_trades=len(kept),
    )
    if len(kept) >= 2:
        result.mean_profit, result.mean_ci = mean_per_trade(result)
    return result


def mean_per_trade(result: StrategyResult) -> tuple[float, tuple[float, float]]:
    """Mean per-trade profit with its Wald 95% CI (the intercept-only
    regression estimate)."""
    if result.n_trades < 2:
        raise ValidationError("mean_per_trade needs at least 2 trades")
    profits = np.array([t.profit for t in result.trades])
    mean = float(profits.mean())
    se = float(profits.std(ddof=1) / np.sqrt(profits.size))
    return mean, (mean - Z_95 * se, mean + Z_95 * se)


def confidence_band_edges(
    trades: list[TradeRecord],
    bands: tuple[tuple[float, float], ...] = CONFIDENCE_BANDS,
) -> list[BandResult]:
    """Excess win rate over the pre-fee price per market-confidence band.

    Market confidence is max(m, 1-m).  The per-trade excess is
    realized_value - entry_cost + fee (the win indicator minus the
    pre-fee price of the side taken), reported in percentage points with
    a one-sample t-test against zero.  Bands with fewer than 2 trades or
    zero spread omit the test.
    """
    out = []
    last = len(bands) - 1
    for b, (lo, hi) in enumerate(bands):
        sel = []
        for t in trades:
            conf = max(t.market_price, 1.0 - t.market_price)
            inside = (lo <= conf <= hi) if b == last else (lo <= conf < hi)
            if inside:
                sel.append(t.realized_value - t.entry_cost + FEE)
        if not sel:
            out.append(BandResult(lo, hi, 0, None, None, None))
            continue
        vals = np.array(sel)
        mean_pp = float(vals.mean() * 100.0)
        if vals.size < 2 or float(vals.std(ddof=1)) == 0.0:
            out.append(BandResult(lo, hi, int(vals.size), mean_pp, None, None))
            continue
        t_stat = float(vals.mean() / (vals.std(ddof=1) / np.sqrt(vals.size)))
        p = float(2.0 * sps.t.sf(abs(t_stat), vals.size - 1))
        out.append(BandResult(lo, hi, int(vals.size), mean_pp, t_stat, p))
    return out


def gating_ece(
    forecasts,
    dataset: Dataset,
    mode: str = "calibration_split",
    calibration_fraction: float = 0.5,
    n_bins: int = 10,
) -> tuple[float, Dataset]:
    """ECE threshold for the edge_above_ece gate.

    calibration_split estimates ECE on the chronologically first
    `calibration_fraction` of the dataset and trades only the disjoint
    remainder (returned as the trading set); in_sample estimates on the
    full dataset and trades all of it.
    """
    probs = _probability_map(forecasts)
    if mode == "in_sample":
        cal, trade_ds = dataset, dataset
    elif mode == "calibration_split":
        cal, trade_ds = split_dataset(dataset, calibration_fraction)
    else:
        raise ValidationError(f"unknown ece source {mode!r}")
    cal_forecasts = [Forecast(q.id, probs.get(q.id)) for q in cal]
    outcomes = {q.id: q.outcome for q in cal}
    return ece_equal_mass(cal_forecasts, outcomes, n_bins), trade_ds


def per_question_profits(
    model_forecasts: dict[str, dict[str, float | None]],
    dataset: Dataset,
    rule_kind: str,
    ece_values: dict[str, float] | None,
    rng_factory,
) -> tuple[np.ndarray, list[str], list[str]]:
    """Profit matrix (eligible questions x models) under one gating rule.

    Questions a model does not trade (absent forecast or gated out)
    contribute 0, keeping rows aligned for the paired bootstrap.
    rng_factory(model_name) supplies each model's tie-break generator.
    """
    names = sorted(model_forecasts)
    rows = [q.id for q in dataset if eligible(q)]
    row_index = {qid: i for i, qid in enumerate(rows)}
    values = np.zeros((len(rows), len(names)))
    for j, name in enumerate(names):
        ece = None if ece_values is None else ece_values.get(name)
        rule = GatingRule(rule_kind, ece)
        result = run_strategy(model_forecasts[name], dataset, rule, rng_factory(name))
        for t in result.trades:
            values[row_index[t.question_id], j] = t.profit
    return values, rows, names
