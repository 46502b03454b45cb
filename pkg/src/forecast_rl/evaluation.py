"""Accuracy, calibration, and statistical comparison of forecast sets.

Forecasts are point probabilities keyed by question id; an absent
probability means the model produced no usable forecast.  Soft-Brier
charges absences 0.25, calibration metrics exclude them, and every
comparison here is paired across the identical question set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as sps

from forecast_rl.errors import DataFormatError, ValidationError
from forecast_rl.reward import soft_brier_loss
from forecast_rl.rng import replicate_seeds

Z_95 = 1.959963984540054  # two-sided 95% normal quantile


@dataclass
class Forecast:
    question_id: str
    probability: float | None

    def validate(self) -> None:
        if self.probability is not None and not (0.0 <= self.probability <= 1.0):
            raise ValidationError(
                f"forecast {self.question_id!r}: probability must lie in [0, 1], "
                f"got {self.probability}"
            )


@dataclass
class BinRow:
    """One equal-mass calibration bin."""

    lo: float
    hi: float
    count: int
    mean_confidence: float
    empirical_frequency: float


@dataclass
class EvalReport:
    """Per-model metrics.  n_questions counts the binned (present)
    forecasts; malformed ones are tallied separately and enter only the
    soft-Brier mean."""

    soft_brier_mean: float
    ece: float
    bins: list[BinRow]
    n_questions: int
    n_malformed: int

    def to_dict(self) -> dict:
        return {
            "soft_brier_mean": self.soft_brier_mean,
            "ece": self.ece,
            "n_questions": self.n_questions,
            "n_malformed": self.n_malformed,
            "bins": [
                {
                    "lo": b.lo,
                    "hi": b.hi,
                    "count": b.count,
                    "mean_confidence": b.mean_confidence,
                    "empirical_frequency": b.empirical_frequency,
                }
                for b in self.bins
            ],
        }


@dataclass
class PairedComparison:
    delta_mean: float
    ci_low: float
    ci_high: float
    p_value: float
    method: str  # wald | bootstrap | welch

    def to_dict(self) -> dict:
        return {
            "delta_mean": self.delta_mean,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "p_value": self.p_value,
            "method": self.method,
        }


def forecasts_from_map(probabilities: dict[str, float | None]) -> list[Forecast]:
    return [Forecast(qid, p) for qid, p in probabilities.items()]


def load_forecasts(path: str | Path) -> list[Forecast]:
    """Read forecast JSONL ({question_id, probability|null} per line)."""
    out: list[Forecast] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                f = Forecast(
                    question_id=str(record["question_id"]),
                    probability=None if record["probability"] is None else float(record["probability"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"invalid forecast record: {exc}", line=line_no) from exc
            f.validate()
            if f.question_id in seen:
                raise DataFormatError(f"duplicate question_id {f.question_id!r}", line=line_no)
            seen.add(f.question_id)
            out.append(f)
    return out


def save_forecasts(forecasts: list[Forecast], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for f in forecasts:
            record = {"question_id": f.question_id, "probability": f.probability}
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _aligned_losses(forecasts: list[Forecast], outcomes: dict[str, int]) -> np.ndarray:
    losses = np.empty(len(forecasts))
    for i, f in enumerate(forecasts):
        if f.question_id not in outcomes:
            raise ValidationError(f"no outcome for forecast {f.question_id!r}")
        losses[i] = soft_brier_loss(f.probability, outcomes[f.question_id])
    return losses


def soft_brier(forecasts: list[Forecast], outcomes: dict[str, int]) -> float:
    """Mean soft-Brier loss over the forecast set."""
    if not forecasts:
        raise ValidationError("soft_brier needs at least one forecast")
    return float(_aligned_losses(forecasts, outcomes).mean())


def _equal_mass_bins(probs: np.ndarray, ys: np.ndarray, n_bins: int) -> list[BinRow]:
    n = probs.shape[0]
    q, r = divmod(n, n_bins)
    rows = []
    start = 0
    for b in range(n_bins):
        size = q + 1 if b < r else q
        sel_p = probs[start : start + size]
        sel_y = ys[start : start + size]
        rows.append(
            BinRow(
                lo=float(sel_p[0]),
                hi=float(sel_p[-1]),
                count=size,
                mean_confidence=float(sel_p.mean()),
                empirical_frequency=float(sel_y.mean()),
            )
        )
        start += size
    return rows


def ece_bins(
    forecasts: list[Forecast], outcomes: dict[str, int], n_bins: int = 10
) -> tuple[float, list[BinRow], int, int]:
    """Equal-mass ECE with its bin table.

    Present forecasts are sorted by (probability, question_id) — the id
    tie-break makes the split of identical probabilities across a bin
    boundary independent of input order — then partitioned into n_bins
    contiguous groups with the larger groups first.
    """
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    present = [f for f in forecasts if f.probability is not None]
    n_malformed = len(forecasts) - len(present)
    if len(present) < n_bins:
        raise ValidationError(
            f"ece needs at least {n_bins} present forecasts, got {len(present)}"
        )
    for f in present:
        if f.question_id not in outcomes:
            raise ValidationError(f"no outcome for forecast {f.question_id!r}")
    present.sort(key=lambda f: (f.probability, f.question_id))
    probs = np.array([f.probability for f in present])
    ys = np.array([outcomes[f.question_id] for f in present], dtype=np.float64)
    rows = _equal_mass_bins(probs, ys, n_bins)
    n = len(present)
    ece = sum((row.count / n) * abs(row.empirical_frequency - row.mean_confidence) for row in rows)
    return float(ece), rows, n, n_malformed


def ece_equal_mass(
    forecasts: list[Forecast], outcomes: dict[str, int], n_bins: int = 10
) -> float:
    return ece_bins(forecasts, outcomes, n_bins)[0]


def ece_equal_mass_arrays(probs: np.ndarray, ys: np.ndarray, n_bins: int = 10) -> float:
    """Array variant for bootstrap replicates.

    NaN marks an absent forecast.  Rows may repeat under resampling, so
    ties sort by position (stable argsort) rather than by question id.
    """
    probs = np.asarray(probs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    mask = ~np.isnan(probs)
    p = probs[mask]
    y = ys[mask]
    if p.size < n_bins:
        raise ValidationError(f"ece needs at least {n_bins} present forecasts, got {p.size}")
    order = np.argsort(p, kind="stable")
    rows = _equal_mass_bins(p[order], y[order], n_bins)
    return float(
        sum((row.count / p.size) * abs(row.empirical_frequency - row.mean_confidence) for row in rows)
    )


def evaluation_report(
    forecasts: list[Forecast], outcomes: dict[str, int], n_bins: int = 10
) -> EvalReport:
    ece, rows, n, n_malformed = ece_bins(forecasts, outcomes, n_bins)
    return EvalReport(
        soft_brier_mean=soft_brier(forecasts, outcomes),
        ece=ece,
        bins=rows,
        n_questions=n,
        n_malformed=n_malformed,
    )


def paired_brier_test(
    a: list[Forecast], b: list[Forecast], outcomes: dict[str, int]
) -> PairedComparison:
    """Wald test on per-question soft-Brier loss differences (a minus b)."""
    ids_a = {f.question_id for f in a}
    ids_b = {f.question_id for f in b}
    if ids_a != ids_b:
        missing = sorted(ids_a ^ ids_b)[:5]
        raise ValidationError(f"forecast sets cover different questions, e.g. {missing}")
    order = sorted(ids_a)
    loss_a = dict(zip([f.question_id for f in a], _aligned_losses(a, outcomes)))
    loss_b = dict(zip([f.question_id for f in b], _aligned_losses(b, outcomes)))
    d = np.array([loss_a[q] - loss_b[q] for q in order])
    mean = float(d.mean())
    sd = float(d.std(ddof=1)) if d.size > 1 else 0.0
    if sd == 0.0:
        # Degenerate differences: flat CI; p hits the machine floor unless
        # the difference is exactly zero.
        p = 1.0 if mean == 0.0 else float(np.finfo(np.float64).tiny)
        return PairedComparison(mean, mean, mean, p, "wald")
    se = sd / np.sqrt(d.size)
    z = mean / se
    p = float(2.0 * sps.norm.sf(abs(z)))
    return PairedComparison(mean, mean - Z_95 * se, mean + Z_95 * se, p, "wald")


def paired_bootstrap_stat(
    n_rows: int,
    stat_fn,
    reps: int = 9999,
    rng: np.random.Generator | None = None,
) -> dict[tuple[int, int], PairedComparison]:
    """Question-level paired bootstrap over an arbitrary row statistic.

    stat_fn maps an index array (rows resampled with replacement, whole
    rows at a time so cross-model pairing is preserved) to a vector of
    per-model statistics.  Each replicate uses its own generator derived
    from a drawn seed, so results do not depend on execution order.
    Two-sided p-values come from the zero-centered difference
    distribution with an add-one correction.
    """
    if rng is None:
        raise ValidationError("paired_bootstrap needs a generator")
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    observed = np.asarray(stat_fn(np.arange(n_rows)), dtype=np.float64)
    n_models = observed.shape[0]
    seeds = replicate_seeds(rng, reps)
    boot = np.empty((reps, n_models))
    for r in range(reps):
        sub = np.random.default_rng(seeds[r])
        idx = sub.integers(0, n_rows, size=n_rows)
        boot[r] = stat_fn(idx)

    out: dict[tuple[int, int], PairedComparison] = {}
    for i in range(n_models):
        for j in range(i + 1, n_models):
            d_hat = float(observed[i] - observed[j])
            d_boot = boot[:, i] - boot[:, j]
            lo, hi = np.percentile(d_boot, [2.5, 97.5])
            centered = d_boot - d_hat
            p = float((1 + np.sum(np.abs(centered) >= abs(d_hat))) / (reps + 1))
            out[(i, j)] = PairedComparison(d_hat, float(lo), float(hi), p, "bootstrap")
    return out


def paired_bootstrap(
    values: np.ndarray,
    statistic: str = "mean",
    reps: int = 9999,
    rng: np.random.Generator | None = None,
) -> dict[tuple[int, int], PairedComparison]:
    """Paired bootstrap of column means or totals of a questions-by-models
    matrix."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValidationError("values must be a questions x models matrix")
    if statistic == "mean":
        stat_fn = lambda idx: values[idx].mean(axis=0)
    elif statistic == "total":
        stat_fn = lambda idx: values[idx].sum(axis=0)
    else:
        raise ValidationError(f"unknown statistic {statistic!r}")
    return paired_bootstrap_stat(values.shape[0], stat_fn, reps, rng)


def welch_test(x: np.ndarray, y: np.ndarray) -> PairedComparison:
    """Welch two-sample t-test with Satterthwaite degrees of freedom."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or y.size < 2:
        raise ValidationError("welch_test needs at least 2 observations per sample")
    vx = float(x.var(ddof=1))
    vy = float(y.var(ddof=1))
    if vx == 0.0 and vy == 0.0:
        raise ValidationError("welch_test is undefined when both samples are constant")
    sx, sy = vx / x.size, vy / y.size
    se = np.sqrt(sx + sy)
    delta = float(x.mean() - y.mean())
    t = delta / se
    df = (sx + sy) ** 2 / (sx**2 / (x.size - 1) + sy**2 / (y.size - 1))
    p = float(2.0 * sps.t.sf(abs(t), df))
    half = float(sps.t.ppf(0.975, df) * se)
    return PairedComparison(delta, delta - half, delta + half, p, "welch")


def welch_statistic(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """The (t, df) pair behind welch_test, for direct inspection."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sx = x.var(ddof=1) / x.size
    sy = y.var(ddof=1) / y.size
    t = (x.mean() - y.mean()) / np.sqrt(sx + sy)
    df = (sx + sy) ** 2 / (sx**2 / (x.size - 1) + sy**2 / (y.size - 1))
    return float(t), float(df)


def extreme_bucket_mass(forecasts: list[Forecast]) -> float:
    """Fraction of present forecasts at or below 10% or at or above 90%.

    Boundaries are inclusive; absent forecasts are excluded from both
    numerator and denominator, and an all-absent set scores 0.
    """
    present = np.array([f.probability for f in forecasts if f.probability is not None])
    if present.size == 0:
        return 0.0
    return float(np.mean((present <= 0.10) | (present >= 0.90)))
