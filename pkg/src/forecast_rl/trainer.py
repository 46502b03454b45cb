"""Strictly-online training loop, DPO training, and prediction.

Every question is visited exactly once in chronological order: sample a
group of responses, score them, take one optimizer step, move on.  The
KL reference policy is re-snapshotted every `outer_iteration_len`
questions.  A rolling early-stop guard watches for the two collapse
modes (gibberish takeover, extreme-probability pileup).

Two backends implement the same loop: the fused kernel in `kernels`
(JIT-compiled when numba is available) and a modular numpy path built
from the `algorithms` primitives.  Both consume one pre-drawn array of
uniform variates, so they agree to floating-point roundoff.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from forecast_rl import kernels
from forecast_rl.algorithms import (
    HyperParams,
    GroupRollout,
    OptimizerState,
    adamw_step,
    baseline_loss_and_grad,
    baseline_predict,
    dpo_loss_and_grad,
    grpo_advantages,
    grpo_objective_and_grad,
    modified_grpo_advantages,
    remax_advantages,
    remax_objective_and_grad,
)
from forecast_rl.data import Dataset, Question
from forecast_rl.errors import NumericAbort, ValidationError
from forecast_rl.policy import (
    ABSTAIN,
    N_ANSWER,
    N_CONTENT,
    PolicyParams,
    Vocabulary,
    head_log_distributions,
    predict_probability,
    sample_response,
    snapshot_reference,
)
from forecast_rl.reward import PenaltyConfig, assess_guardrails, total_reward
from forecast_rl.rng import substream

BACKENDS = ("auto", "numba", "numpy")

_ALGO_CODES = {
    "grpo": kernels.ALGO_GRPO,
    "modified_grpo": kernels.ALGO_MODIFIED_GRPO,
    "remax": kernels.ALGO_REMAX,
}


@dataclass
class EarlyStopConfig:
    """Collapse detection over a rolling window of recent questions."""

    window: int = 200
    gibberish_threshold: float = 0.5
    extreme_mass_threshold: float = 0.9
    enabled: bool = True

    def validate(self) -> None:
        if self.window < 1:
            raise ValidationError("early_stop window must be >= 1")
        for name in ("gibberish_threshold", "extreme_mass_threshold"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValidationError(f"{name} must lie in (0, 1]")


@dataclass
class TrainConfig:
    algorithm: str = "remax"
    outer_iteration_len: int = 500
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    seed: int = 0
    member: int = 0  # ensemble member index; selects the sampling substream
    guardrails_enabled: bool = True
    checkpoint_every: int = 0
    content_length: int = 8

    def validate(self) -> None:
        if self.algorithm not in ("grpo", "modified_grpo", "remax", "dpo"):
            raise ValidationError(f"unknown algorithm {self.algorithm!r}")
        if self.outer_iteration_len < 1:
            raise ValidationError("outer_iteration_len must be >= 1")
        if self.checkpoint_every < 0:
            raise ValidationError("checkpoint_every must be >= 0")
        if self.content_length < 1:
            raise ValidationError("content_length must be >= 1")
        if self.member < 0:
            raise ValidationError("member must be >= 0")
        self.early_stop.validate()


@dataclass
class RunLog:
    """One record per training question, in stream order."""

    question_ids: list[str]
    parsed: np.ndarray  # NaN where the first sampled response abstained
    rewards: np.ndarray  # group-mean total reward
    gibberish: np.ndarray  # group-mean proportions
    non_english: np.ndarray
    explanation: np.ndarray
    stopped: bool = False
    stop_reason: str | None = None

    def __len__(self) -> int:
        return len(self.question_ids)

    def to_records(self) -> list[dict]:
        out = []
        for i, qid in enumerate(self.question_ids):
            p = self.parsed[i]
            out.append(
                {
                    "id": qid,
                    "parsed": None if np.isnan(p) else float(p),
                    "reward": float(self.rewards[i]),
                    "gibberish": float(self.gibberish[i]),
                    "non_english": float(self.non_english[i]),
                    "explanation": float(self.explanation[i]),
                }
            )
        return out

    def to_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.to_records():
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def summary(self) -> dict:
        present = self.parsed[~np.isnan(self.parsed)]
        extreme = float(np.mean((present <= 0.10) | (present >= 0.90))) if present.size else 0.0
        return {
            "n_questions": len(self),
            "mean_reward": float(self.rewards.mean()) if len(self) else 0.0,
            "mean_gibberish": float(self.gibberish.mean()) if len(self) else 0.0,
            "abstain_rate": 1.0 - (present.size / len(self)) if len(self) else 0.0,
            "extreme_bucket_mass": extreme,
            "stopped": self.stopped,
            "stop_reason": self.stop_reason,
        }


@dataclass
class TrainResult:
    params: PolicyParams
    baseline: np.ndarray | None
    run_log: RunLog
    stopped: bool = False
    stop_reason: str | None = None


def check_early_stop(
    parsed_window: np.ndarray, gibberish_window: np.ndarray, cfg: EarlyStopConfig
) -> tuple[bool, str | None]:
    """Collapse test over one full window of per-question log values."""
    gib_mean = float(np.mean(gibberish_window))
    if gib_mean > cfg.gibberish_threshold:
        return True, "gibberish"
    present = parsed_window[~np.isnan(parsed_window)]
    if present.size:
        extreme = float(np.mean((present <= 0.10) | (present >= 0.90)))
        if extreme > cfg.extreme_mass_threshold:
            return True, "extreme_mass"
    return False, None


def resolve_backend(backend: str) -> str:
    if backend not in BACKENDS:
        raise ValidationError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    if backend == "auto":
        return "numba" if kernels.NUMBA_AVAILABLE else "numpy"
    return backend


def _effective_penalties(penalties: PenaltyConfig, enabled: bool) -> PenaltyConfig:
    if enabled:
        return penalties
    return PenaltyConfig(0.0, 0.0, 0.0, 0.0, penalties.input_truncation_chars)


def _pack_hp(
    algo: str, hp: HyperParams, pcfg: PenaltyConfig, es: EarlyStopConfig, actor_lr: float
) -> np.ndarray:
    packed = np.zeros(kernels.HP_SIZE)
    packed[kernels.HP_ALGO] = _ALGO_CODES[algo]
    packed[kernels.HP_ACTOR_LR] = actor_lr
    packed[kernels.HP_KL_COEFF] = hp.kl_coeff
    packed[kernels.HP_CLIP_EPS] = hp.clip_eps
    packed[kernels.HP_ENT_COEFF] = hp.entropy_coeff
    packed[kernels.HP_BETA1] = hp.adam_beta1
    packed[kernels.HP_BETA2] = hp.adam_beta2
    packed[kernels.HP_ADAM_EPS] = hp.adam_eps
    packed[kernels.HP_WEIGHT_DECAY] = hp.weight_decay
    packed[kernels.HP_GRAD_CLIP] = hp.grad_clip_norm
    packed[kernels.HP_BASE_LR] = hp.baseline_lr
    packed[kernels.HP_BASE_SCALE] = hp.baseline_loss_scale
    packed[kernels.HP_LAM_LANG] = pcfg.lambda_lang
    packed[kernels.HP_LAM_GIB] = pcfg.lambda_gib
    packed[kernels.HP_LAM_MISS] = pcfg.lambda_miss
    packed[kernels.HP_LAM_EXP] = pcfg.lambda_exp
    packed[kernels.HP_ES_ENABLED] = 1.0 if es.enabled else 0.0
    packed[kernels.HP_ES_WINDOW] = es.window
    packed[kernels.HP_ES_GIB_THR] = es.gibberish_threshold
    packed[kernels.HP_ES_EXT_THR] = es.extreme_mass_threshold
    return packed


class _Logs:
    def __init__(self, n: int):
        self.parsed = np.full(n, np.nan)
        self.reward = np.zeros(n)
        self.gib = np.zeros(n)
        self.nep = np.zeros(n)
        self.expq = np.zeros(n)


def _run_span_numpy(
    params: PolicyParams,
    ref: PolicyParams,
    baseline: np.ndarray,
    actor_state: OptimizerState,
    base_state: OptimizerState,
    X: np.ndarray,
    Y: np.ndarray,
    U: np.ndarray,
    start: int,
    end: int,
    algo: str,
    pcfg: PenaltyConfig,
    hp: HyperParams,
    actor_lr: float,
    es: EarlyStopConfig,
    logs: _Logs,
    ids: list[str],
) -> tuple[int, int]:
    """Modular numpy twin of kernels.run_span, same return contract."""
    G = U.shape[1]
    for i in range(start, end):
        x = X[i]
        y = int(Y[i])
        try:
            responses = [sample_response(params, x, uniforms=U[i, g]) for g in range(G)]
            assessments = [assess_guardrails(r) for r in responses]
            breakdowns = [
                total_reward(r.parse_probability(), y, g, pcfg, schema_valid=r.schema_valid)
                for r, g in zip(responses, assessments)
            ]
            rewards = np.array([b.total for b in breakdowns])

            if algo == "grpo":
                advs = grpo_advantages(rewards)
            elif algo == "modified_grpo":
                advs = modified_grpo_advantages(rewards)
            else:
                advs = remax_advantages(rewards, baseline_predict(baseline, x))

            group = GroupRollout.from_sampling(ids[i], x, responses, rewards, advs, params)
            if algo == "remax":
                _, grads = remax_objective_and_grad(group, params, ref, hp)
            else:
                _, grads = grpo_objective_and_grad(group, params, ref, hp)
            neg = {name: -g for name, g in grads.items()}
            adamw_step(
                {"content": params.content_weights, "answer": params.answer_weights},
                neg,
                actor_state,
                hp,
                actor_lr,
            )
            if algo == "remax":
                _, bgrads = baseline_loss_and_grad(baseline, x, rewards, hp)
                adamw_step({"baseline": baseline}, bgrads, base_state, hp, hp.baseline_lr)
        except NumericAbort:
            return kernels.SPAN_NUMERIC, i

        p0 = responses[0].parse_probability()
        logs.parsed[i] = np.nan if p0 is None else p0
        logs.reward[i] = rewards.mean()
        logs.gib[i] = float(np.mean([a.gibberish_proportion for a in assessments]))
        logs.nep[i] = float(np.mean([a.non_english_proportion for a in assessments]))
        logs.expq[i] = float(np.mean([a.explanation_quality for a in assessments]))

        if es.enabled and i + 1 >= es.window:
            lo = i + 1 - es.window
            hit, _ = check_early_stop(logs.parsed[lo : i + 1], logs.gib[lo : i + 1], es)
            if hit:
                return kernels.SPAN_EARLY_STOP, i + 1
    return kernels.SPAN_OK, end


def train_online(
    stream: Dataset,
    cfg: TrainConfig,
    hp: HyperParams,
    penalties: PenaltyConfig | None = None,
    backend: str = "auto",
    init_params: PolicyParams | None = None,
    checkpoint_cb=None,
) -> TrainResult:
    """Single chronological pass over the stream with one update per
    question.

    Early stop returns a partial, flagged RunLog.  A numeric failure
    raises NumericAbort carrying the last good parameters (from the most
    recent span boundary) and the log up to the failing question.
    """
    cfg.validate()
    hp.validate()
    if cfg.algorithm == "dpo":
        raise ValidationError("dpo is trained offline; use train_dpo")
    penalties = penalties if penalties is not None else PenaltyConfig()
    penalties.validate()
    backend = resolve_backend(backend)

    n = len(stream)
    if n == 0:
        if init_params is None:
            raise ValidationError("an empty stream needs init_params to size the policy")
        empty = RunLog([], np.empty(0), np.empty(0), np.empty(0), np.empty(0), np.empty(0))
        return TrainResult(init_params.copy(), None, empty)

    ts = [q.prediction_ts for q in stream.questions]
    if any(a > b for a, b in zip(ts, ts[1:])):
        raise ValidationError("stream must be sorted by prediction_ts")

    d = stream.feature_dim
    if init_params is None:
        params = PolicyParams.zeros(d, Vocabulary(cfg.content_length))
    else:
        if init_params.feature_dim != d:
            raise ValidationError("init_params feature_dim does not match the stream")
        params = init_params.copy()
    L = params.vocab.content_length
    G = hp.group_size
    if cfg.algorithm in ("grpo", "modified_grpo") and G < 2:
        raise ValidationError("GRPO variants need group_size >= 2")

    pcfg = _effective_penalties(penalties, cfg.guardrails_enabled)
    actor_lr = hp.resolve_actor_lr(cfg.algorithm)
    X = np.ascontiguousarray(stream.feature_matrix())
    Y = stream.outcomes()
    ids = stream.ids()
    U = substream(cfg.seed, "sampling", cfg.member).random((n, G, L + 1))
    logs = _Logs(n)
    baseline = np.zeros(d + 1)

    if backend == "numpy":
        actor_state = OptimizerState.for_params(
            {"content": params.content_weights, "answer": params.answer_weights}
        )
        base_state = OptimizerState.for_params({"baseline": baseline})
    else:
        m_c = np.zeros_like(params.content_weights)
        v_c = np.zeros_like(params.content_weights)
        m_a = np.zeros_like(params.answer_weights)
        v_a = np.zeros_like(params.answer_weights)
        m_b = np.zeros_like(baseline)
        v_b = np.zeros_like(baseline)
        steps = np.zeros(2, dtype=np.int64)
        hp_vec = _pack_hp(cfg.algorithm, hp, pcfg, cfg.early_stop, actor_lr)

    boundaries = {0, n}
    boundaries.update(range(0, n, cfg.outer_iteration_len))
    if cfg.checkpoint_every > 0:
        boundaries.update(range(0, n, cfg.checkpoint_every))
    bounds = sorted(boundaries)

    ref = snapshot_reference(params)
    processed = 0
    stopped = False
    reason: str | None = None
    for s, e in zip(bounds[:-1], bounds[1:]):
        if s > 0 and s % cfg.outer_iteration_len == 0:
            ref = snapshot_reference(params)
        if checkpoint_cb is not None and s > 0 and cfg.checkpoint_every > 0 and s % cfg.checkpoint_every == 0:
            partial = RunLog(
                ids[:s], logs.parsed[:s].copy(), logs.reward[:s].copy(),
                logs.gib[:s].copy(), logs.nep[:s].copy(), logs.expq[:s].copy(),
            )
            checkpoint_cb(params, baseline, s, partial)
        good_params = params.copy()
        good_baseline = baseline.copy()

        if backend == "numpy":
            status, nxt = _run_span_numpy(
                params, ref, baseline, actor_state, base_state,
                X, Y, U, s, e, cfg.algorithm, pcfg, hp, actor_lr, cfg.early_stop, logs, ids,
            )
        else:
            status, nxt = kernels.run_span(
                params.content_weights, params.answer_weights,
                ref.content_weights, ref.answer_weights, baseline,
                m_c, v_c, m_a, v_a, m_b, v_b, steps,
                X, Y, U, s, e, hp_vec,
                logs.parsed, logs.reward, logs.gib, logs.nep, logs.expq,
            )

        if status == kernels.SPAN_NUMERIC:
            partial = RunLog(
                ids[:nxt], logs.parsed[:nxt], logs.reward[:nxt],
                logs.gib[:nxt], logs.nep[:nxt], logs.expq[:nxt],
            )
            raise NumericAbort(
                f"non-finite gradient at question {ids[nxt]!r} (index {nxt})",
                params=good_params,
                baseline=good_baseline,
                run_log=partial,
            )
        processed = nxt
        if status == kernels.SPAN_EARLY_STOP:
            stopped = True
            lo = processed - cfg.early_stop.window
            _, reason = check_early_stop(
                logs.parsed[lo:processed], logs.gib[lo:processed], cfg.early_stop
            )
            break

    run_log = RunLog(
        ids[:processed],
        logs.parsed[:processed],
        logs.reward[:processed],
        logs.gib[:processed],
        logs.nep[:processed],
        logs.expq[:processed],
        stopped=stopped,
        stop_reason=reason,
    )
    return TrainResult(params, baseline if cfg.algorithm == "remax" else None, run_log, stopped, reason)


def _log_softmax_rows(Z: np.ndarray) -> np.ndarray:
    shifted = Z - Z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def train_dpo(
    stream: Dataset,
    cfg: TrainConfig,
    hp: HyperParams,
    penalties: PenaltyConfig | None = None,
    init_params: PolicyParams | None = None,
) -> TrainResult:
    """Offline preference training.

    Two responses per question are sampled once from the frozen reference
    (the initial policy); the higher-total-reward response is preferred
    and ties are dropped.  The pair set is then optimized for dpo_epochs
    shuffled epochs in minibatches of dpo_batch.
    """
    cfg.validate()
    hp.validate()
    penalties = penalties if penalties is not None else PenaltyConfig()
    penalties.validate()
    n = len(stream)
    if n == 0:
        raise ValidationError("dpo training needs a non-empty stream")

    d = stream.feature_dim
    params = init_params.copy() if init_params is not None else PolicyParams.zeros(d, Vocabulary(cfg.content_length))
    if params.feature_dim != d:
        raise ValidationError("init_params feature_dim does not match the stream")
    ref = snapshot_reference(params)
    L = params.vocab.content_length
    pcfg = _effective_penalties(penalties, cfg.guardrails_enabled)
    rng = substream(cfg.seed, "dpo", cfg.member)
    U = rng.random((n, 2, L + 1))

    X = stream.feature_matrix()
    Y = stream.outcomes()
    ids = stream.ids()
    logs = _Logs(n)

    pair_rows: list[int] = []
    cdiff_rows: list[np.ndarray] = []
    answer_pairs: list[tuple[int, int]] = []
    ref_margins: list[float] = []
    for i in range(n):
        y = int(Y[i])
        pair = [sample_response(ref, X[i], uniforms=U[i, k]) for k in range(2)]
        assessments = [assess_guardrails(r) for r in pair]
        totals = [
            total_reward(r.parse_probability(), y, g, pcfg, schema_valid=r.schema_valid).total
            for r, g in zip(pair, assessments)
        ]
        p0 = pair[0].parse_probability()
        logs.parsed[i] = np.nan if p0 is None else p0
        logs.reward[i] = float(np.mean(totals))
        logs.gib[i] = float(np.mean([a.gibberish_proportion for a in assessments]))
        logs.nep[i] = float(np.mean([a.non_english_proportion for a in assessments]))
        logs.expq[i] = float(np.mean([a.explanation_quality for a in assessments]))
        if totals[0] == totals[1]:
            continue
        w, l = (0, 1) if totals[0] > totals[1] else (1, 0)
        counts_w = np.bincount(pair[w].content, minlength=N_CONTENT).astype(np.float64)
        counts_l = np.bincount(pair[l].content, minlength=N_CONTENT).astype(np.float64)
        log_c, log_a = head_log_distributions(ref, X[i])
        rm = float(
            (counts_w - counts_l) @ log_c + log_a[pair[w].answer] - log_a[pair[l].answer]
        )
        pair_rows.append(i)
        cdiff_rows.append(counts_w - counts_l)
        answer_pairs.append((pair[w].answer, pair[l].answer))
        ref_margins.append(rm)

    if not pair_rows:
        raise ValidationError("no valid preference pairs: every sampled pair tied")

    rows = np.array(pair_rows)
    cdiff = np.stack(cdiff_rows)
    answers = np.array(answer_pairs)
    ref_margin = np.array(ref_margins)
    Xt = np.hstack([np.ones((len(rows), 1)), X[rows]])

    state = OptimizerState.for_params(
        {"content": params.content_weights, "answer": params.answer_weights}
    )
    P = len(rows)
    for _ in range(hp.dpo_epochs):
        perm = rng.permutation(P)
        for lo in range(0, P, hp.dpo_batch):
            sel = perm[lo : lo + hp.dpo_batch]
            B = len(sel)
            xb = Xt[sel]
            log_c = _log_softmax_rows(xb @ params.content_weights)
            log_a = _log_softmax_rows(xb @ params.answer_weights)
            theta_diff = (
                np.sum(cdiff[sel] * log_c, axis=1)
                + log_a[np.arange(B), answers[sel, 0]]
                - log_a[np.arange(B), answers[sel, 1]]
            )
            z = hp.dpo_beta * (theta_diff - ref_margin[sel])
            coeff = -hp.dpo_beta / (1.0 + np.exp(z))  # d loss / d margin per pair
            g_content = xb.T @ (coeff[:, None] * cdiff[sel]) / B
            mask = np.zeros((B, N_ANSWER))
            mask[np.arange(B), answers[sel, 0]] += 1.0
            mask[np.arange(B), answers[sel, 1]] -= 1.0
            g_answer = xb.T @ (coeff[:, None] * mask) / B
            adamw_step(
                {"content": params.content_weights, "answer": params.answer_weights},
                {"content": g_content, "answer": g_answer},
                state,
                hp,
                hp.dpo_lr,
            )

    run_log = RunLog(ids, logs.parsed, logs.reward, logs.gib, logs.nep, logs.expq)
    return TrainResult(params, None, run_log)


def train(
    stream: Dataset,
    cfg: TrainConfig,
    hp: HyperParams,
    penalties: PenaltyConfig | None = None,
    backend: str = "auto",
    init_params: PolicyParams | None = None,
    checkpoint_cb=None,
) -> TrainResult:
    """Dispatch to the online loop or the offline DPO path."""
    if cfg.algorithm == "dpo":
        return train_dpo(stream, cfg, hp, penalties, init_params)
    return train_online(stream, cfg, hp, penalties, backend, init_params, checkpoint_cb)


def predict(params: PolicyParams, question: Question) -> float | None:
    """Deterministic greedy forecast for one question."""
    if question.features.shape[0] != params.feature_dim:
        raise ValidationError(
            f"question {question.id!r} has feature dim {question.features.shape[0]}, "
            f"policy expects {params.feature_dim}"
        )
    return predict_probability(params, question.features)


def predict_dataset(params: PolicyParams, dataset: Dataset) -> dict[str, float | None]:
    return {q.id: predict(params, q) for q in dataset}


@dataclass
class EnsembleSpec:
    """K policies whose forecasts are averaged."""

    members: list[PolicyParams]

    def validate(self) -> None:
        if not self.members:
            raise ValidationError("an ensemble needs at least one member")
        dim = self.members[0].feature_dim
        L = self.members[0].vocab.content_length
        for m in self.members[1:]:
            if m.feature_dim != dim or m.vocab.content_length != L:
                raise ValidationError("ensemble members must share vocabulary and feature dim")


def ensemble_predict(spec: EnsembleSpec, question: Question) -> float | None:
    """Mean of the members' forecasts, skipping abstentions.

    Identical member values short-circuit to that value so a K-copy
    ensemble reproduces the single model bit-for-bit (a naive sum/K is
    not exact in floating point).
    """
    spec.validate()
    present = [p for p in (predict(m, question) for m in spec.members) if p is not None]
    if not present:
        return None
    if min(present) == max(present):
        return present[0]
    return float(sum(present) / len(present))


def ensemble_predict_dataset(spec: EnsembleSpec, dataset: Dataset) -> dict[str, float | None]:
    return {q.id: ensemble_predict(spec, q) for q in dataset}
