import numpy as np
import pytest

from forecast_rl.data import Dataset, Question


def make_question(
    qid: str,
    pred_ts: int = 100,
    outcome: int = 1,
    features=None,
    market_price=None,
    volume=None,
    open_ts=None,
    close_ts=None,
    resolve_ts=None,
) -> Question:
    open_ts = pred_ts - 10 if open_ts is None else open_ts
    close_ts = pred_ts + 10 if close_ts is None else close_ts
    resolve_ts = close_ts + 10 if resolve_ts is None else resolve_ts
    return Question(
        id=qid,
        open_ts=open_ts,
        close_ts=close_ts,
        resolve_ts=resolve_ts,
        prediction_ts=pred_ts,
        outcome=outcome,
        features=np.zeros(2) if features is None else np.asarray(features, dtype=np.float64),
        market_price=market_price,
        volume=volume,
    )


def make_dataset(questions, split="train") -> Dataset:
    return Dataset(questions=sorted(questions, key=lambda q: (q.prediction_ts, q.id)), split=split)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_policy_grad(fn, params, step=1e-5):
    """Central finite differences of a scalar fn(params) over both heads.

    Mutates and restores the weight arrays in place, so fn must read the
    weights fresh on every call.
    """
    grads = {}
    for name, arr in (("content", params.content_weights), ("answer", params.answer_weights)):
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            hi = fn(params)
            arr[idx] = orig - step
            lo = fn(params)
            arr[idx] = orig
            g[idx] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads


def fd_vector_grad(fn, weights, step=1e-5):
    """Central finite differences of a scalar fn(weights) over one vector."""
    g = np.zeros_like(weights)
    for i in range(weights.shape[0]):
        orig = weights[i]
        weights[i] = orig + step
        hi = fn(weights)
        weights[i] = orig - step
        lo = fn(weights)
        weights[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return g


def max_rel_err(analytic, fd, floor=1e-6):
    """Worst per-entry relative error between two gradient dicts."""
    worst = 0.0
    for name, a in analytic.items():
        f = fd[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        worst = max(worst, float(np.max(np.abs(a - f) / denom)))
    return worst
