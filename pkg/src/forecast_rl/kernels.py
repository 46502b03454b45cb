"""Fused per-question training kernel.

The online loop is inherently sequential (each update feeds the next
question's sampling distribution), so the hot path is a single compiled
kernel that runs one span of the stream: sample G responses, score them,
form advantages, and apply one AdamW step per question.  With numba
available the kernel is JIT-compiled; set FORECAST_RL_NO_NUMBA=1 (or run
without numba installed) and the same function body executes as plain
Python, which the trainer only uses for small parity checks.

The maths mirrors the modular numpy implementations in `algorithms`;
both consume the same pre-drawn uniform variates, so short runs agree to
floating-point roundoff.
"""

from __future__ import annotations

import os

import numpy as np

NUMBA_DISABLED = os.environ.get("FORECAST_RL_NO_NUMBA", "") == "1"

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled by FORECAST_RL_NO_NUMBA")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised via the env flag
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


# Algorithm codes shared with the trainer.
ALGO_GRPO = 0
ALGO_MODIFIED_GRPO = 1
ALGO_REMAX = 2

# Packed hyperparameter vector layout.
HP_ALGO = 0
HP_ACTOR_LR = 1
HP_KL_COEFF = 2
HP_CLIP_EPS = 3
HP_ENT_COEFF = 4
HP_BETA1 = 5
HP_BETA2 = 6
HP_ADAM_EPS = 7
HP_WEIGHT_DECAY = 8
HP_GRAD_CLIP = 9
HP_BASE_LR = 10
HP_BASE_SCALE = 11
HP_LAM_LANG = 12
HP_LAM_GIB = 13
HP_LAM_MISS = 14
HP_LAM_EXP = 15
HP_ES_ENABLED = 16
HP_ES_WINDOW = 17
HP_ES_GIB_THR = 18
HP_ES_EXT_THR = 19
HP_SIZE = 20

# Span exit codes.
SPAN_OK = 0
SPAN_EARLY_STOP = 1
SPAN_NUMERIC = 2

# Token ids, kept in sync with `policy`.
_RATIONALE = 0
_GIBBERISH = 1
_NONENGLISH = 2
_ABSTAIN = 101


@njit(cache=True)
def _log_softmax_into(xt, W, out):
    """out <- log softmax(xt @ W) along the token axis."""
    n = W.shape[1]
    hi = -np.inf
    for k in range(n):
        z = 0.0
        for j in range(xt.shape[0]):
            z += xt[j] * W[j, k]
        out[k] = z
        if z > hi:
            hi = z
    s = 0.0
    for k in range(n):
        s += np.exp(out[k] - hi)
    ls = hi + np.log(s)
    for k in range(n):
        out[k] -= ls


@njit(cache=True)
def _sample_index(p, u):
    """Smallest k with cumulative probability above u."""
    c = 0.0
    for k in range(p.shape[0] - 1):
        c += p[k]
        if u < c:
            return k
    return p.shape[0] - 1


@njit(cache=True)
def _adamw_inplace(W, m, v, gz, xt, scale, lr, b1, b2, eps, wd, bc1, bc2):
    """AdamW update for one head whose gradient is outer(xt, gz) * scale."""
    for j in range(W.shape[0]):
        for k in range(W.shape[1]):
            g = xt[j] * gz[k] * scale
            m[j, k] = b1 * m[j, k] + (1.0 - b1) * g
            v[j, k] = b2 * v[j, k] + (1.0 - b2) * g * g
            upd = (m[j, k] / bc1) / (np.sqrt(v[j, k] / bc2) + eps)
            if wd > 0.0:
                upd += wd * W[j, k]
            W[j, k] -= lr * upd


@njit(cache=True)
def run_span(
    W_c,
    W_a,
    ref_c,
    ref_a,
    w_b,
    m_c,
    v_c,
    m_a,
    v_a,
    m_b,
    v_b,
    steps,
    X,
    Y,
    U,
    start,
    end,
    hp,
    parsed_out,
    reward_out,
    gib_out,
    nep_out,
    exp_out,
):
    """Train on questions [start, end) with a fixed KL reference.

    Mutates the weights, optimizer moments, and per-question log arrays
    in place.  Returns (status, next_index): next_index is one past the
    last processed question on SPAN_OK and SPAN_EARLY_STOP, and the index
    of the failing question on SPAN_NUMERIC (whose update was refused).
    """
    n_c = W_c.shape[1]
    n_a = W_a.shape[1]
    d = X.shape[1]
    G = U.shape[1]
    L = U.shape[2] - 1
    n_tok = L + 1

    algo = int(hp[HP_ALGO])
    lr = hp[HP_ACTOR_LR]
    beta = hp[HP_KL_COEFF]
    ent = hp[HP_ENT_COEFF]
    b1 = hp[HP_BETA1]
    b2 = hp[HP_BETA2]
    eps = hp[HP_ADAM_EPS]
    wd = hp[HP_WEIGHT_DECAY]
    clip_norm = hp[HP_GRAD_CLIP]
    base_lr = hp[HP_BASE_LR]
    base_scale = hp[HP_BASE_SCALE]
    lam_lang = hp[HP_LAM_LANG]
    lam_gib = hp[HP_LAM_GIB]
    lam_miss = hp[HP_LAM_MISS]
    lam_exp = hp[HP_LAM_EXP]
    es_on = hp[HP_ES_ENABLED] > 0.0
    es_window = int(hp[HP_ES_WINDOW])
    es_gib = hp[HP_ES_GIB_THR]
    es_ext = hp[HP_ES_EXT_THR]

    xt = np.empty(d + 1)
    log_c = np.empty(n_c)
    log_a = np.empty(n_a)
    rlog_c = np.empty(n_c)
    rlog_a = np.empty(n_a)
    p_c = np.empty(n_c)
    p_a = np.empty(n_a)
    content = np.empty((G, L), dtype=np.int64)
    answers = np.empty(G, dtype=np.int64)
    rewards = np.empty(G)
    advs = np.empty(G)
    coeff_c = np.empty(n_c)
    coeff_a = np.empty(n_a)
    gz_c = np.empty(n_c)
    gz_a = np.empty(n_a)

    for i in range(start, end):
        xt[0] = 1.0
        for j in range(d):
            xt[j + 1] = X[i, j]
        y = Y[i]

        _log_softmax_into(xt, W_c, log_c)
        _log_softmax_into(xt, W_a, log_a)
        _log_softmax_into(xt, ref_c, rlog_c)
        _log_softmax_into(xt, ref_a, rlog_a)
        for k in range(n_c):
            p_c[k] = np.exp(log_c[k])
        for k in range(n_a):
            p_a[k] = np.exp(log_a[k])

        # Sample the group and score it.
        gib_sum = 0.0
        nep_sum = 0.0
        exp_sum = 0.0
        for g in range(G):
            for t in range(L):
                content[g, t] = _sample_index(p_c, U[i, g, t])
            answers[g] = _sample_index(p_a, U[i, g, L])

            gib_ct = 0
            nep_ct = 0
            rat_ct = 0
            for t in range(L):
                tok = content[g, t]
                if tok == _GIBBERISH:
                    gib_ct += 1
                elif tok == _NONENGLISH:
                    nep_ct += 1
                else:
                    rat_ct += 1
            nep = nep_ct / L
            gp = gib_ct / L
            eq = rat_ct / L
            if answers[g] == _ABSTAIN:
                strict = -1.0
            else:
                v_hat = answers[g] / 100.0
                strict = -((v_hat - y) ** 2)
            miss = 0.0 if rat_ct > 0 else -lam_miss
            rewards[g] = strict + (-lam_lang * nep) + (-lam_gib * gp) + miss + lam_exp * eq
            gib_sum += gp
            nep_sum += nep
            exp_sum += eq

        # Advantages.
        mu = 0.0
        for g in range(G):
            mu += rewards[g]
        mu /= G
        if algo == ALGO_GRPO:
            var = 0.0
            for g in range(G):
                var += (rewards[g] - mu) ** 2
            sigma = np.sqrt(var / G)
            if sigma == 0.0:
                for g in range(G):
                    advs[g] = 0.0
            else:
                for g in range(G):
                    advs[g] = (rewards[g] - mu) / sigma
        elif algo == ALGO_MODIFIED_GRPO:
            for g in range(G):
                advs[g] = rewards[g] - mu
        else:
            b = 0.0
            for j in range(d + 1):
                b += xt[j] * w_b[j]
            for g in range(G):
                advs[g] = rewards[g] - b

        # Logit gradients of the maximization objective.  On-policy the
        # importance ratios are exactly 1 and never clipped, so the GRPO
        # token weight reduces to adv / (G * n_tok); ReMax uses adv / G.
        for k in range(n_c):
            coeff_c[k] = 0.0
        for k in range(n_a):
            coeff_a[k] = 0.0
        wsum_c = 0.0
        wsum_a = 0.0
        for g in range(G):
            if algo == ALGO_REMAX:
                w = advs[g] / G
            else:
                w = advs[g] / (G * n_tok)
            for t in range(L):
                coeff_c[content[g, t]] += w
            coeff_a[answers[g]] += w
            wsum_c += w * L
            wsum_a += w

        kl_c = 0.0
        h_c = 0.0
        for k in range(n_c):
            kl_c += p_c[k] * (log_c[k] - rlog_c[k])
            h_c -= p_c[k] * log_c[k]
        kl_a = 0.0
        h_a = 0.0
        for k in range(n_a):
            kl_a += p_a[k] * (log_a[k] - rlog_a[k])
            h_a -= p_a[k] * log_a[k]

        for k in range(n_c):
            surr = coeff_c[k] - wsum_c * p_c[k]
            dkl = p_c[k] * ((log_c[k] - rlog_c[k]) - kl_c)
            dh = -p_c[k] * (log_c[k] + h_c)
            gz_c[k] = -(surr - beta * L * dkl + ent * L * dh)
        for k in range(n_a):
            surr = coeff_a[k] - wsum_a * p_a[k]
            dkl = p_a[k] * ((log_a[k] - rlog_a[k]) - kl_a)
            dh = -p_a[k] * (log_a[k] + h_a)
            gz_a[k] = -(surr - beta * dkl + ent * dh)

        # Global norm of the actor gradient outer(xt, gz_head).
        xt_sq = 0.0
        for j in range(d + 1):
            xt_sq += xt[j] * xt[j]
        gz_sq = 0.0
        for k in range(n_c):
            gz_sq += gz_c[k] * gz_c[k]
        for k in range(n_a):
            gz_sq += gz_a[k] * gz_a[k]
        norm = np.sqrt(xt_sq * gz_sq)
        if not np.isfinite(norm):
            return SPAN_NUMERIC, i
        scale = clip_norm / norm if norm > clip_norm else 1.0

        steps[0] += 1
        t_actor = steps[0]
        bc1 = 1.0 - b1**t_actor
        bc2 = 1.0 - b2**t_actor
        _adamw_inplace(W_c, m_c, v_c, gz_c, xt, scale, lr, b1, b2, eps, wd, bc1, bc2)
        _adamw_inplace(W_a, m_a, v_a, gz_a, xt, scale, lr, b1, b2, eps, wd, bc1, bc2)

        if algo == ALGO_REMAX:
            resid_mean = 0.0
            for g in range(G):
                resid_mean += advs[g]
            resid_mean /= G
            gb_coeff = -2.0 * base_scale * resid_mean  # grad of the MSE in b - r
            b_norm = np.abs(gb_coeff) * np.sqrt(xt_sq)
            if not np.isfinite(b_norm):
                return SPAN_NUMERIC, i
            b_scale = clip_norm / b_norm if b_norm > clip_norm else 1.0
            steps[1] += 1
            t_base = steps[1]
            bcb1 = 1.0 - b1**t_base
            bcb2 = 1.0 - b2**t_base
            for j in range(d + 1):
                g = gb_coeff * xt[j] * b_scale
                m_b[j] = b1 * m_b[j] + (1.0 - b1) * g
                v_b[j] = b2 * v_b[j] + (1.0 - b2) * g * g
                upd = (m_b[j] / bcb1) / (np.sqrt(v_b[j] / bcb2) + eps)
                if wd > 0.0:
                    upd += wd * w_b[j]
                w_b[j] -= base_lr * upd

        # Per-question log: first response's parse, group means otherwise.
        if answers[0] == _ABSTAIN:
            parsed_out[i] = np.nan
        else:
            parsed_out[i] = answers[0] / 100.0
        reward_out[i] = mu
        gib_out[i] = gib_sum / G
        nep_out[i] = nep_sum / G
        exp_out[i] = exp_sum / G

        if es_on and i + 1 >= es_window:
            gib_roll = 0.0
            present = 0
            extreme = 0
            for w in range(i - es_window + 1, i + 1):
                gib_roll += gib_out[w]
                pv = parsed_out[w]
                if not np.isnan(pv):
                    present += 1
                    if pv <= 0.10 or pv >= 0.90:
                        extreme += 1
            gib_roll /= es_window
            ext_mass = extreme / present if present > 0 else 0.0
            if gib_roll > es_gib or ext_mass > es_ext:
                return SPAN_EARLY_STOP, i + 1

    return SPAN_OK, end
