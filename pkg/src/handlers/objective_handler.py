"""
Preference objectives with exact gradients.

Every policy-facing loss returns an ObjectiveValue whose gradient is taken with
respect to the flattened policy parameters. The reference policy is frozen and
contributes no gradient.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_expit

from src.handlers.policy_handler import (
    IntervalPrompt,
    PolicySnapshot,
    PreferenceRecord,
    Response,
    SampleGroup,
    SoftmaxPolicy,
)

logger = logging.getLogger(__name__)

PREFERENCE_METHODS = ("dpo", "ipo", "mdpo", "mipo")
METHODS = ("sft",) + PREFERENCE_METHODS

Reference = Union[SoftmaxPolicy, PolicySnapshot]
SftExample = Tuple[IntervalPrompt, Response]


@dataclass(frozen=True)
class ObjectiveConfig:
    beta: float = 0.01
    tau: float = 0.1
    nll_coeff: float = 0.0
    variance_correction: bool = True

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.nll_coeff >= 0:
            raise ValueError(f"nll_coeff must be non-negative, got {self.nll_coeff}")

    @property
    def ipo_target(self) -> float:
        return 1.0 / (2.0 * self.tau)

    @classmethod
    def for_method(cls, method: str, **overrides: Any) -> 'ObjectiveConfig':
        """Defaults used for the RNG experiment: NLL anchor 0.001 for (m)DPO, 0.1 for (m)IPO."""
        if method in ("dpo", "mdpo", "sft"):
            base = {"beta": 0.01, "nll_coeff": 0.001}
        elif method in ("ipo", "mipo"):
            base = {"tau": 0.1, "nll_coeff": 0.1}
        else:
            raise ValueError(f"Unknown objective: {method}")
        base.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**base)

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> 'ObjectiveConfig':
        return cls(
            beta=float(config_dict.get("beta", 0.01)),
            tau=float(config_dict.get("tau", 0.1)),
            nll_coeff=float(config_dict.get("nll_coeff", 0.0)),
            variance_correction=bool(config_dict.get("variance_correction", True)),
        )


@dataclass
class ObjectiveValue:
    loss: float
    gradient: np.ndarray


@dataclass(frozen=True)
class DiffusionBatchStub:
    """
    Squared denoising errors for a chosen and a rejected group of images.

    Each ``sq_err_*`` field holds one entry per group member; the ``_w`` fields
    describe the chosen group and the ``_l`` fields the rejected group.
    """
    sq_err_policy_w: Sequence[float]
    sq_err_ref_w: Sequence[float]
    sq_err_policy_l: Sequence[float]
    sq_err_ref_l: Sequence[float]
    T: int
    omega_lambda_t: float
    beta: float

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")
        if not self.omega_lambda_t > 0 or not self.beta > 0:
            raise ValueError("omega_lambda_t and beta must be positive")
        for name in ("sq_err_policy_w", "sq_err_ref_w", "sq_err_policy_l", "sq_err_ref_l"):
            values = np.asarray(getattr(self, name), dtype=float)
            if values.size == 0:
                raise ValueError(f"empty group: {name}")
            if (values < 0).any():
                raise ValueError(f"squared errors must be non-negative: {name}")
        if len(self.sq_err_policy_w) != len(self.sq_err_ref_w):
            raise ValueError("chosen policy and reference errors differ in length")
        if len(self.sq_err_policy_l) != len(self.sq_err_ref_l):
            raise ValueError("rejected policy and reference errors differ in length")


def neg_log_sigmoid(z: float) -> float:
    """-log(sigmoid(z)), i.e. softplus(-z), stable for large |z|."""
    return float(-log_expit(z))


def sample_variance(values: np.ndarray) -> float:
    """Unbiased sample variance; 0 for a single value."""
    if values.size < 2:
        return 0.0
    return float(np.var(values, ddof=1))


def mdpo_from_log_ratios(
    ratios_w: np.ndarray, ratios_l: np.ndarray, beta: float
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Group-mean DPO loss on per-response log ratios.

    Returns:
        (loss, d loss / d ratios_w, d loss / d ratios_l)
    """
    ratios_w = np.asarray(ratios_w, dtype=float)
    ratios_l = np.asarray(ratios_l, dtype=float)
    if ratios_w.size == 0 or ratios_l.size == 0:
        raise ValueError("empty group")
    z = beta * (ratios_w.mean() - ratios_l.mean())
    loss = neg_log_sigmoid(z)
    d_margin = -beta * float(expit(-z))
    return (
        loss,
        np.full(ratios_w.size, d_margin / ratios_w.size),
        np.full(ratios_l.size, -d_margin / ratios_l.size),
    )


def mipo_from_log_ratios(
    ratios_w: np.ndarray,
    ratios_l: np.ndarray,
    target: float,
    variance_correction: bool = True,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Group-mean IPO loss with the optional sample-variance correction.

    loss = (mean_w - mean_l - target)^2 - svar_w / k_w - svar_l / k_l
    """
    ratios_w = np.asarray(ratios_w, dtype=float)
    ratios_l = np.asarray(ratios_l, dtype=float)
    if ratios_w.size == 0 or ratios_l.size == 0:
        raise ValueError("empty group")
    k_w, k_l = ratios_w.size, ratios_l.size
    mean_w, mean_l = ratios_w.mean(), ratios_l.mean()
    h = mean_w - mean_l - target
    loss = h * h
    grad_w = np.full(k_w, 2.0 * h / k_w)
    grad_l = np.full(k_l, -2.0 * h / k_l)
    if variance_correction:
        loss = loss - sample_variance(ratios_w) / k_w - sample_variance(ratios_l) / k_l
        if k_w > 1:
            grad_w -= 2.0 * (ratios_w - mean_w) / (k_w * (k_w - 1))
        if k_l > 1:
            grad_l -= 2.0 * (ratios_l - mean_l) / (k_l * (k_l - 1))
    return float(loss), grad_w, grad_l


def _log_ratios(policy: SoftmaxPolicy, ref: Reference, prompt: IntervalPrompt, group: SampleGroup) -> np.ndarray:
    return policy.log_probs(prompt, group.responses) - ref.log_probs(prompt, group.responses)


def implicit_reward(
    policy: SoftmaxPolicy, ref: Reference, prompt: IntervalPrompt, response: Response, beta: float
) -> float:
    return beta * (policy.log_prob(prompt, response) - ref.log_prob(prompt, response))


def group_log_ratio(policy: SoftmaxPolicy, ref: Reference, prompt: IntervalPrompt, group: SampleGroup) -> float:
    """Mean per-response log(pi / pi_ref) over the group."""
    return float(_log_ratios(policy, ref, prompt, group).mean())


def _preference_terms(
    method: str,
    policy: SoftmaxPolicy,
    ref: Reference,
    record: PreferenceRecord,
    config: ObjectiveConfig,
    out: np.ndarray,
    weight: float,
) -> float:
    ratios_w = _log_ratios(policy, ref, record.prompt, record.chosen)
    ratios_l = _log_ratios(policy, ref, record.prompt, record.rejected)
    if method in ("dpo", "mdpo"):
        loss, grad_w, grad_l = mdpo_from_log_ratios(ratios_w, ratios_l, config.beta)
    elif method in ("ipo", "mipo"):
        loss, grad_w, grad_l = mipo_from_log_ratios(
            ratios_w, ratios_l, config.ipo_target, config.variance_correction
        )
    else:
        raise ValueError(f"Unknown preference objective: {method}")
    policy.accumulate_grad(record.prompt, record.chosen.responses, weight * grad_w, out)
    policy.accumulate_grad(record.prompt, record.rejected.responses, weight * grad_l, out)
    return loss


def _nll_terms(
    policy: SoftmaxPolicy, prompt: IntervalPrompt, group: SampleGroup, out: np.ndarray, weight: float
) -> float:
    log_probs = policy.log_probs(prompt, group.responses)
    policy.accumulate_grad(prompt, group.responses, np.full(group.k, -weight / group.k), out)
    return float(-log_probs.mean())


def _require_single(record: PreferenceRecord, method: str) -> None:
    if record.chosen.k != 1 or record.rejected.k != 1:
        raise ValueError(
            f"{method} expects groups of size 1 (got {record.chosen.k} and {record.rejected.k}); "
            f"use m{method} for multi-sample records"
        )


def _accumulate(
    method: str,
    policy: SoftmaxPolicy,
    ref: Reference,
    record: PreferenceRecord,
    config: ObjectiveConfig,
    out: np.ndarray,
    weight: float,
) -> float:
    if method in ("dpo", "ipo"):
        _require_single(record, method)
    loss = _preference_terms(method, policy, ref, record, config, out, weight)
    if config.nll_coeff > 0:
        loss += config.nll_coeff * _nll_terms(
            policy, record.prompt, record.chosen, out, weight * config.nll_coeff
        )
    return loss


def _single(method: str, policy: SoftmaxPolicy, ref: Reference, record: PreferenceRecord,
            config: ObjectiveConfig) -> ObjectiveValue:
    out = np.zeros(policy.num_params)
    bare = ObjectiveConfig(config.beta, config.tau, 0.0, config.variance_correction)
    loss = _accumulate(method, policy, ref, record, bare, out, 1.0)
    return ObjectiveValue(loss, out)


def sft_nll(policy: SoftmaxPolicy, dataset: Sequence[SftExample]) -> ObjectiveValue:
    """Mean negative log-likelihood of (prompt, response) pairs."""
    if not dataset:
        raise ValueError("empty dataset")
    out = np.zeros(policy.num_params)
    weight = 1.0 / len(dataset)
    total = 0.0
    for prompt, response in dataset:
        total -= policy.log_prob(prompt, response)
        policy.accumulate_grad(prompt, [response], [-weight], out)
    return ObjectiveValue(total / len(dataset), out)


def dpo_loss(policy: SoftmaxPolicy, ref: Reference, record: PreferenceRecord,
             config: ObjectiveConfig) -> ObjectiveValue:
    _require_single(record, "dpo")
    return _single("dpo", policy, ref, record, config)


def ipo_loss(policy: SoftmaxPolicy, ref: Reference, record: PreferenceRecord,
             config: ObjectiveConfig) -> ObjectiveValue:
    _require_single(record, "ipo")
    return _single("ipo", policy, ref, record, config)


def mdpo_loss(policy: SoftmaxPolicy, ref: Reference, record: PreferenceRecord,
              config: ObjectiveConfig) -> ObjectiveValue:
    return _single("mdpo", policy, ref, record, config)


def mipo_loss(policy: SoftmaxPolicy, ref: Reference, record: PreferenceRecord,
              config: ObjectiveConfig) -> ObjectiveValue:
    return _single("mipo", policy, ref, record, config)


def composite_objective(
    policy: SoftmaxPolicy,
    ref: Reference,
    record: PreferenceRecord,
    config: ObjectiveConfig,
    method: str = "mdpo",
) -> ObjectiveValue:
    """Preference loss plus nll_coeff times the mean NLL of the chosen group."""
    if method not in PREFERENCE_METHODS:
        raise ValueError(f"Unknown preference objective: {method}")
    out = np.zeros(policy.num_params)
    loss = _accumulate(method, policy, ref, record, config, out, 1.0)
    return ObjectiveValue(loss, out)


def batch_objective(
    policy: SoftmaxPolicy,
    ref: Optional[Reference],
    batch: Sequence[Any],
    method: str,
    config: ObjectiveConfig,
) -> ObjectiveValue:
    """
    Mean objective over a mini-batch, accumulated into a single gradient buffer.

    Args:
        batch: (prompt, response) pairs for "sft", PreferenceRecords otherwise
        method: one of sft, dpo, ipo, mdpo, mipo; a positive nll_coeff adds the
            chosen-group NLL anchor to the preference methods
    """
    if not batch:
        raise ValueError("empty batch")
    if method == "sft":
        return sft_nll(policy, batch)
    if method not in PREFERENCE_METHODS:
        raise ValueError(f"Unknown objective: {method}")
    if ref is None:
        raise ValueError(f"{method} requires a reference policy")
    out = np.zeros(policy.num_params)
    weight = 1.0 / len(batch)
    total = 0.0
    for record in batch:
        total += _accumulate(method, policy, ref, record, config, out, weight)
    return ObjectiveValue(total / len(batch), out)


def mdpo_diffusion_loss(stub: DiffusionBatchStub) -> float:
    """
    Group form of the diffusion DPO loss.

    r = policy squared error - reference squared error is a cost, so the chosen
    group is preferred when its mean r is lower.
    """
    r_w = np.asarray(stub.sq_err_policy_w, dtype=float) - np.asarray(stub.sq_err_ref_w, dtype=float)
    r_l = np.asarray(stub.sq_err_policy_l, dtype=float) - np.asarray(stub.sq_err_ref_l, dtype=float)
    z = -stub.beta * stub.T * stub.omega_lambda_t * (r_w.mean() - r_l.mean())
    return neg_log_sigmoid(z)


OBJECTIVES: Dict[str, Callable[..., ObjectiveValue]] = {
    "dpo": dpo_loss,
    "ipo": ipo_loss,
    "mdpo": mdpo_loss,
    "mipo": mipo_loss,
}
