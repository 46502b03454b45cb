"""Categorical forecasting policy.

A response is a fixed-length sequence of content tokens followed by one
answer token.  Content tokens share a single categorical distribution
across all slots; the answer token has its own distribution over the 101
probability values 0.00 .. 1.00 plus an explicit abstain token.  Both
distributions are linear softmax heads on a bias-augmented feature
vector, so zero weights give the uniform policy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from forecast_rl.errors import NumericAbort, ValidationError

RATIONALE = 0
GIBBERISH = 1
NONENGLISH = 2
N_CONTENT = 3

N_PROB = 101  # P_0 .. P_100
ABSTAIN = 101
N_ANSWER = 102

ANSWER_VALUES = np.arange(N_PROB, dtype=np.float64) / 100.0

CONTENT_TOKEN_TEXT = {
    RATIONALE: "because the base rate and current evidence point this way",
    GIBBERISH: "zxqv kplf wrtm glorp",
    NONENGLISH: "par consequent la probabilite semble etre",
}

CHECKPOINT_VERSION = 1


@dataclass
class Vocabulary:
    """Token layout shared by every policy in a run."""

    content_length: int = 8

    def __post_init__(self) -> None:
        if self.content_length < 1:
            raise ValidationError("content_length must be >= 1")

    @property
    def n_content(self) -> int:
        return N_CONTENT

    @property
    def n_answer(self) -> int:
        return N_ANSWER

    def max_entropy(self) -> float:
        return self.content_length * np.log(N_CONTENT) + np.log(N_ANSWER)


@dataclass
class PolicyParams:
    """Weights of the two softmax heads.

    Shapes are (feature_dim + 1, n_tokens); row 0 is the bias.  Zero
    initialization yields the uniform policy over both heads.
    """

    content_weights: np.ndarray
    answer_weights: np.ndarray
    vocab: Vocabulary = field(default_factory=Vocabulary)

    @classmethod
    def zeros(cls, feature_dim: int, vocab: Vocabulary | None = None) -> "PolicyParams":
        vocab = vocab or Vocabulary()
        return cls(
            content_weights=np.zeros((feature_dim + 1, N_CONTENT)),
            answer_weights=np.zeros((feature_dim + 1, N_ANSWER)),
            vocab=vocab,
        )

    @property
    def feature_dim(self) -> int:
        return self.content_weights.shape[0] - 1

    def validate(self) -> None:
        if self.content_weights.ndim != 2 or self.content_weights.shape[1] != N_CONTENT:
            raise ValidationError(f"content_weights must have shape (d+1, {N_CONTENT})")
        if self.answer_weights.shape != (self.content_weights.shape[0], N_ANSWER):
            raise ValidationError(f"answer_weights must have shape (d+1, {N_ANSWER})")
        if not (np.all(np.isfinite(self.content_weights)) and np.all(np.isfinite(self.answer_weights))):
            raise ValidationError("policy weights must be finite")

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            content_weights=self.content_weights.copy(),
            answer_weights=self.answer_weights.copy(),
            vocab=Vocabulary(self.vocab.content_length),
        )


@dataclass
class Response:
    """One sampled response: L content tokens then one answer token.

    token_logprobs holds the sampling-time log-probabilities (L+1
    values); it is None on hand-constructed responses.
    """

    content: np.ndarray  # (L,) int token ids
    answer: int
    schema_valid: bool = True
    token_logprobs: np.ndarray | None = None

    def parse_probability(self) -> float | None:
        """The forecast the response commits to, or None when abstaining."""
        if not self.schema_valid or self.answer == ABSTAIN:
            return None
        return float(ANSWER_VALUES[self.answer])

    def render_text(self) -> str:
        """Plain-text rendering used by the guard-rail scorer."""
        words = [CONTENT_TOKEN_TEXT[int(t)] for t in self.content]
        if self.answer == ABSTAIN:
            words.append("final answer: abstain")
        else:
            words.append(f"final answer: {ANSWER_VALUES[self.answer]:.2f}")
        return " ".join(words)


def augment(x: np.ndarray) -> np.ndarray:
    """Prepend the bias feature: x -> [1, x]."""
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate(([1.0], x))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    return shifted - np.log(np.sum(np.exp(shifted)))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def head_distributions(params: PolicyParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Content and answer probability vectors at feature vector x."""
    xt = augment(x)
    return softmax(xt @ params.content_weights), softmax(xt @ params.answer_weights)


def head_log_distributions(params: PolicyParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xt = augment(x)
    return log_softmax(xt @ params.content_weights), log_softmax(xt @ params.answer_weights)


def _sample_index(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF sample: smallest k with cumsum(probs)[k] > u."""
    c = 0.0
    for k in range(probs.shape[0] - 1):
        c += probs[k]
        if u < c:
            return k
    return probs.shape[0] - 1


def sample_response(
    params: PolicyParams,
    x: np.ndarray,
    rng: np.random.Generator | None = None,
    uniforms: np.ndarray | None = None,
) -> Response:
    """Sample one response.

    Either an rng or a pre-drawn array of L+1 uniforms must be given; the
    uniforms path exists so different backends can consume identical
    randomness.
    """
    L = params.vocab.content_length
    if uniforms is None:
        if rng is None:
            raise ValidationError("sample_response needs an rng or pre-drawn uniforms")
        uniforms = rng.random(L + 1)
    if uniforms.shape != (L + 1,):
        raise ValidationError(f"expected {L + 1} uniforms, got shape {uniforms.shape}")
    log_c, log_a = head_log_distributions(params, x)
    if not (np.all(np.isfinite(log_c)) and np.all(np.isfinite(log_a))):
        raise NumericAbort("non-finite logits while sampling")
    content_p, answer_p = np.exp(log_c), np.exp(log_a)
    content = np.array([_sample_index(content_p, float(uniforms[t])) for t in range(L)], dtype=np.int64)
    answer = _sample_index(answer_p, float(uniforms[L]))
    logprobs = np.concatenate((log_c[content], [log_a[answer]]))
    return Response(content=content, answer=answer, token_logprobs=logprobs)


def response_logprob(params: PolicyParams, x: np.ndarray, response: Response) -> float:
    """Joint log-probability of a response: sum over all L+1 tokens."""
    log_c, log_a = head_log_distributions(params, x)
    return float(np.sum(log_c[response.content]) + log_a[response.answer])


def predict_probability(params: PolicyParams, x: np.ndarray) -> float | None:
    """Greedy forecast: the argmax answer token (ties to the lowest
    index), or None when the argmax is the abstain token."""
    _, answer_p = head_distributions(params, x)
    k = int(np.argmax(answer_p))
    if k == ABSTAIN:
        return None
    return float(ANSWER_VALUES[k])


def kl_divergence(params: PolicyParams, ref: PolicyParams, x: np.ndarray) -> float:
    """KL(pi_theta(.|x) || pi_ref(.|x)) over full responses.

    Tokens are independent given x, so the response-level KL is L times
    the content-head KL plus the answer-head KL.
    """
    L = params.vocab.content_length
    log_c, log_a = head_log_distributions(params, x)
    ref_log_c, ref_log_a = head_log_distributions(ref, x)
    kl_c = float(np.sum(np.exp(log_c) * (log_c - ref_log_c)))
    kl_a = float(np.sum(np.exp(log_a) * (log_a - ref_log_a)))
    return L * kl_c + kl_a


def entropy(params: PolicyParams, x: np.ndarray) -> float:
    """Entropy of the full response distribution at x."""
    L = params.vocab.content_length
    log_c, log_a = head_log_distributions(params, x)
    h_c = -float(np.sum(np.exp(log_c) * log_c))
    h_a = -float(np.sum(np.exp(log_a) * log_a))
    return L * h_c + h_a


def snapshot_reference(params: PolicyParams) -> PolicyParams:
    """Frozen copy for KL anchoring; arrays are marked read-only so a
    buggy update step cannot silently mutate the anchor."""
    ref = params.copy()
    ref.content_weights.flags.writeable = False
    ref.answer_weights.flags.writeable = False
    return ref


def save_checkpoint(
    params: PolicyParams,
    path: str | Path,
    baseline_weights: np.ndarray | None = None,
) -> None:
    """Write params as JSON.  Python's repr-based float serialization
    round-trips float64 exactly, so load(save(p)) is bit-identical."""
    params.validate()
    record = {
        "version": CHECKPOINT_VERSION,
        "content_length": params.vocab.content_length,
        "feature_dim": params.feature_dim,
        "content_weights": params.content_weights.tolist(),
        "answer_weights": params.answer_weights.tolist(),
        "baseline_weights": None if baseline_weights is None else baseline_weights.tolist(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, np.ndarray | None]:
    with open(path, encoding="utf-8") as fh:
        record = json.load(fh)
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {record.get('version')!r}")
    params = PolicyParams(
        content_weights=np.asarray(record["content_weights"], dtype=np.float64),
        answer_weights=np.asarray(record["answer_weights"], dtype=np.float64),
        vocab=Vocabulary(int(record["content_length"])),
    )
    params.validate()
    if params.feature_dim != int(record["feature_dim"]):
        raise ValidationError("checkpoint feature_dim does not match weight shapes")
    baseline = record.get("baseline_weights")
    return params, None if baseline is None else np.asarray(baseline, dtype=np.float64)
