"""
Prompt, response and policy types for single-step categorical policies.

Both policy families expose exact log-probabilities and analytic gradients so
every preference objective can be differentiated without an autodiff framework.
"""

import copy
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax

from src.config import config

logger = logging.getLogger(__name__)

FeatureMap = Callable[["IntervalPrompt", int], np.ndarray]


@dataclass(frozen=True)
class IntervalPrompt:
    """A request for a random integer in [lo, hi], both ends inclusive."""
    id: int
    lo: int
    hi: int

    def __post_init__(self):
        if self.id < 0:
            raise ValueError(f"prompt id must be non-negative, got {self.id}")
        if self.lo < 0 or self.lo > self.hi:
            raise ValueError(f"invalid interval [{self.lo}, {self.hi}] for prompt {self.id}")

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1

    def contains(self, token: int) -> bool:
        return self.lo <= token <= self.hi

    def to_dict(self) -> Dict[str, int]:
        return {"id": self.id, "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'IntervalPrompt':
        return cls(id=int(data["id"]), lo=int(data["lo"]), hi=int(data["hi"]))


@dataclass(frozen=True)
class Response:
    tokens: Tuple[int, ...]

    def __post_init__(self):
        tokens = tuple(int(t) for t in self.tokens)
        if not tokens:
            raise ValueError("response must contain at least one token")
        if min(tokens) < 0:
            raise ValueError(f"negative token index in response {tokens}")
        object.__setattr__(self, "tokens", tokens)

    @classmethod
    def single(cls, token: int) -> 'Response':
        return cls((token,))


@dataclass(frozen=True)
class SampleGroup:
    """k i.i.d. responses to one prompt."""
    responses: Tuple[Response, ...]

    def __post_init__(self):
        responses = tuple(self.responses)
        if not responses:
            raise ValueError("empty group")
        object.__setattr__(self, "responses", responses)

    @property
    def k(self) -> int:
        return len(self.responses)

    @classmethod
    def from_tokens(cls, tokens: Iterable[int]) -> 'SampleGroup':
        return cls(tuple(Response.single(t) for t in tokens))

    def head(self, count: int) -> 'SampleGroup':
        return SampleGroup(self.responses[:count])

    def to_lists(self) -> List[List[int]]:
        return [list(r.tokens) for r in self.responses]

    @classmethod
    def from_lists(cls, data: Sequence[Sequence[int]]) -> 'SampleGroup':
        return cls(tuple(Response(tuple(tokens)) for tokens in data))


@dataclass(frozen=True)
class PreferenceRecord:
    prompt: IntervalPrompt
    chosen: SampleGroup
    rejected: SampleGroup

    def truncate(self, k: int) -> 'PreferenceRecord':
        """Keep the first k responses of each side."""
        return PreferenceRecord(self.prompt, self.chosen.head(k), self.rejected.head(k))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "prompt": self.prompt.to_dict(),
            "chosen": self.chosen.to_lists(),
            "rejected": self.rejected.to_lists(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PreferenceRecord':
        try:
            return cls(
                prompt=IntervalPrompt.from_dict(data["prompt"]),
                chosen=SampleGroup.from_lists(data["chosen"]),
                rejected=SampleGroup.from_lists(data["rejected"]),
            )
        except KeyError as e:
            raise ValueError(f"Invalid record structure, missing {e}")


def interval_features(prompt: IntervalPrompt, vocab_size: int) -> np.ndarray:
    """
    Feature matrix of shape (vocab_size, 5) for every token under a prompt.

    Columns: inside [lo, hi], below lo, above hi, normalized offset inside the
    interval (0 outside it or when lo == hi), squared offset.
    """
    tokens = np.arange(vocab_size)
    inside = (tokens >= prompt.lo) & (tokens <= prompt.hi)
    span = prompt.hi - prompt.lo
    offset = np.zeros(vocab_size)
    if span > 0:
        offset = np.where(inside, (tokens - prompt.lo) / span, 0.0)
    return np.column_stack([
        inside.astype(float),
        (tokens < prompt.lo).astype(float),
        (tokens > prompt.hi).astype(float),
        offset,
        offset ** 2,
    ])


class SoftmaxPolicy(ABC):
    """
    Conditional categorical distribution over an integer vocabulary.

    A multi-token response is scored as the sum of per-token log-probabilities
    under the same prompt-conditioned distribution.
    """

    kind: str = ""

    def __init__(self, vocab_size: int):
        if vocab_size < 2:
            raise ValueError(f"vocab_size must be at least 2, got {vocab_size}")
        self.vocab_size = vocab_size

    @property
    @abstractmethod
    def params(self) -> np.ndarray:
        """Flat parameter view; writing into it updates the policy."""

    @abstractmethod
    def logits(self, prompt: IntervalPrompt) -> np.ndarray:
        pass

    @abstractmethod
    def _backprop_logits(self, prompt: IntervalPrompt, logit_grad: np.ndarray, out: np.ndarray) -> None:
        """Add the parameter gradient implied by d(objective)/d(logits) into out."""

    @property
    def num_params(self) -> int:
        return self.params.size

    def set_params(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        if values.shape != self.params.shape:
            raise ValueError(f"parameter shape mismatch: expected {self.params.shape}, got {values.shape}")
        self.params[:] = values

    def _check_response(self, response: Response) -> None:
        if max(response.tokens) >= self.vocab_size:
            raise ValueError(f"token out of vocabulary (size {self.vocab_size}): {response.tokens}")

    def _check_prompt(self, prompt: IntervalPrompt) -> None:
        if prompt.hi >= self.vocab_size:
            raise ValueError(f"prompt {prompt.id} interval [{prompt.lo}, {prompt.hi}] exceeds vocab {self.vocab_size}")

    def predictive_distribution(self, prompt: IntervalPrompt) -> np.ndarray:
        return softmax(self.logits(prompt))

    def restricted_distribution(self, prompt: IntervalPrompt) -> np.ndarray:
        """Predictive distribution restricted to [lo, hi] and renormalized."""
        return softmax(self.logits(prompt)[prompt.lo:prompt.hi + 1])

    def log_probs(self, prompt: IntervalPrompt, responses: Sequence[Response]) -> np.ndarray:
        log_p = log_softmax(self.logits(prompt))
        values = np.empty(len(responses))
        for i, response in enumerate(responses):
            self._check_response(response)
            values[i] = log_p[list(response.tokens)].sum()
        return values

    def log_prob(self, prompt: IntervalPrompt, response: Response) -> float:
        return float(self.log_probs(prompt, [response])[0])

    def accumulate_grad(
        self,
        prompt: IntervalPrompt,
        responses: Sequence[Response],
        weights: Sequence[float],
        out: np.ndarray,
    ) -> None:
        """out += sum_i weights[i] * grad log pi(responses[i] | prompt)"""
        counts = np.zeros(self.vocab_size)
        total = 0.0
        for response, weight in zip(responses, weights):
            self._check_response(response)
            np.add.at(counts, list(response.tokens), weight)
            total += weight * len(response.tokens)
        if total == 0.0 and not counts.any():
            return
        logit_grad = counts - total * self.predictive_distribution(prompt)
        self._backprop_logits(prompt, logit_grad, out)

    def grad_log_prob(self, prompt: IntervalPrompt, response: Response) -> np.ndarray:
        out = np.zeros(self.num_params)
        self.accumulate_grad(prompt, [response], [1.0], out)
        return out

    def sample(self, prompt: IntervalPrompt, rng: np.random.Generator, count: int) -> SampleGroup:
        if count < 1:
            raise ValueError(f"sample count must be positive, got {count}")
        tokens = rng.choice(self.vocab_size, size=count, p=self.predictive_distribution(prompt))
        return SampleGroup.from_tokens(tokens)

    def copy(self) -> 'SoftmaxPolicy':
        return copy.deepcopy(self)

    def snapshot(self) -> 'PolicySnapshot':
        return PolicySnapshot(self)

    def prompt_ids(self) -> List[int]:
        return []

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "vocab_size": self.vocab_size,
            "prompt_ids": self.prompt_ids(),
            "params": [float(x) for x in self.params],
        }

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()), encoding="utf-8")
        logger.info(f"Saved {self.kind} policy to {path}")
        return path

    def _freeze(self) -> None:
        self.params.flags.writeable = False


class TabularPolicy(SoftmaxPolicy):
    """One free logit row per known prompt."""

    kind = "tabular"

    def __init__(
        self,
        prompt_ids: Sequence[int],
        vocab_size: Optional[int] = None,
        logits: Optional[np.ndarray] = None,
    ):
        super().__init__(vocab_size or config.VOCAB_SIZE)
        ids = [int(pid) for pid in prompt_ids]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate prompt ids")
        self.prompt_index: Dict[int, int] = {pid: row for row, pid in enumerate(ids)}
        shape = (len(ids), self.vocab_size)
        if logits is None:
            self.table = np.zeros(shape)
        else:
            self.table = np.array(logits, dtype=float).reshape(shape)

    @property
    def params(self) -> np.ndarray:
        return self.table.reshape(-1)

    def prompt_ids(self) -> List[int]:
        return list(self.prompt_index)

    def _row(self, prompt: IntervalPrompt) -> int:
        row = self.prompt_index.get(prompt.id)
        if row is None:
            raise ValueError(f"unknown prompt: {prompt.id}")
        return row

    def logits(self, prompt: IntervalPrompt) -> np.ndarray:
        row = self._row(prompt)
        self._check_prompt(prompt)
        return self.table[row]

    def _backprop_logits(self, prompt: IntervalPrompt, logit_grad: np.ndarray, out: np.ndarray) -> None:
        start = self._row(prompt) * self.vocab_size
        out[start:start + self.vocab_size] += logit_grad

    def _freeze(self) -> None:
        self.table.flags.writeable = False


class LinearSoftmaxPolicy(SoftmaxPolicy):
    """Logits are phi(prompt, token) . weights, shared across all prompts."""

    kind = "linear"

    def __init__(
        self,
        vocab_size: Optional[int] = None,
        weights: Optional[np.ndarray] = None,
        feature_map: FeatureMap = interval_features,
    ):
        super().__init__(vocab_size or config.VOCAB_SIZE)
        self.feature_map = feature_map
        sample_features = feature_map(IntervalPrompt(0, 0, 0), self.vocab_size)
        self.num_features = sample_features.shape[1]
        if weights is None:
            self.weights = np.zeros(self.num_features)
        else:
            self.weights = np.array(weights, dtype=float).reshape(self.num_features)

    @property
    def params(self) -> np.ndarray:
        return self.weights

    def features(self, prompt: IntervalPrompt) -> np.ndarray:
        self._check_prompt(prompt)
        return self.feature_map(prompt, self.vocab_size)

    def logits(self, prompt: IntervalPrompt) -> np.ndarray:
        return self.features(prompt) @ self.weights

    def _backprop_logits(self, prompt: IntervalPrompt, logit_grad: np.ndarray, out: np.ndarray) -> None:
        out += self.features(prompt).T @ logit_grad


Policy = Union[TabularPolicy, LinearSoftmaxPolicy]


class PolicySnapshot:
    """Frozen copy of a policy, used as the reference model."""

    def __init__(self, policy: SoftmaxPolicy):
        if isinstance(policy, PolicySnapshot):
            policy = policy._policy
        self._policy = policy.copy()
        self._policy._freeze()

    @property
    def kind(self) -> str:
        return self._policy.kind

    @property
    def vocab_size(self) -> int:
        return self._policy.vocab_size

    @property
    def params(self) -> np.ndarray:
        return self._policy.params

    def logits(self, prompt: IntervalPrompt) -> np.ndarray:
        return self._policy.logits(prompt)

    def log_prob(self, prompt: IntervalPrompt, response: Response) -> float:
        return self._policy.log_prob(prompt, response)

    def log_probs(self, prompt: IntervalPrompt, responses: Sequence[Response]) -> np.ndarray:
        return self._policy.log_probs(prompt, responses)

    def predictive_distribution(self, prompt: IntervalPrompt) -> np.ndarray:
        return self._policy.predictive_distribution(prompt)

    def restricted_distribution(self, prompt: IntervalPrompt) -> np.ndarray:
        return self._policy.restricted_distribution(prompt)

    def sample(self, prompt: IntervalPrompt, rng: np.random.Generator, count: int) -> SampleGroup:
        return self._policy.sample(prompt, rng, count)

    def thaw(self) -> SoftmaxPolicy:
        """Mutable copy of the frozen policy."""
        policy = copy.deepcopy(self._policy)
        if isinstance(policy, TabularPolicy):
            policy.table = policy.table.copy()
        else:
            policy.weights = policy.weights.copy()
        return policy

    def to_dict(self) -> Dict[str, Any]:
        return self._policy.to_dict()

    def save(self, path: Union[str, Path]) -> Path:
        return self._policy.save(path)


def policy_from_dict(data: Dict[str, Any]) -> SoftmaxPolicy:
    """Rebuild a policy from its JSON object form."""
    try:
        kind = data["kind"]
        vocab_size = int(data["vocab_size"])
        params = np.array(data["params"], dtype=float)
        if kind == "tabular":
            return TabularPolicy(data["prompt_ids"], vocab_size=vocab_size, logits=params)
        if kind == "linear":
            return LinearSoftmaxPolicy(vocab_size=vocab_size, weights=params)
    except KeyError as e:
        raise ValueError(f"Invalid policy structure, missing {e}")
    raise ValueError(f"Unknown policy kind: {kind}")


def load_policy(path: Union[str, Path]) -> SoftmaxPolicy:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Policy file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        logger.error(f"Failed to parse policy file {path}: {e}")
        raise ValueError(f"Failed to parse policy file {path}: {e}")
    return policy_from_dict(data)


def make_policy(kind: str, prompts: Sequence[IntervalPrompt], vocab_size: Optional[int] = None) -> SoftmaxPolicy:
    """Fresh uniform policy of the named family."""
    if kind == "tabular":
        return TabularPolicy([p.id for p in prompts], vocab_size=vocab_size)
    if kind == "linear":
        return LinearSoftmaxPolicy(vocab_size=vocab_size)
    raise ValueError(f"Unknown policy kind: {kind}")
