"""
First-order training loop for softmax policies.

Batches are drawn without replacement per epoch from a seeded permutation, so a
run is fully determined by its config, dataset and initial policy.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.config import config
from src.handlers.objective_handler import (
    METHODS,
    ObjectiveConfig,
    Reference,
    batch_objective,
)
from src.handlers.policy_handler import (
    IntervalPrompt,
    PolicySnapshot,
    PreferenceRecord,
    Response,
    SoftmaxPolicy,
)

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


class TrainingAbortedError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""

    def __init__(self, step: int, message: str):
        super().__init__(f"Training aborted at step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    steps: int = 500
    batch_size: int = 16
    seed: int = config.SEED
    objective: str = "mdpo"
    objective_config: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    log_every: int = 100

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"Unknown optimizer: {self.optimizer}")
        if self.objective not in METHODS:
            raise ValueError(f"Unknown objective: {self.objective}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError(f"steps and batch_size must be positive, got {self.steps}, {self.batch_size}")
        beta1, beta2 = self.betas
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError(f"Adam betas must lie in [0, 1), got {self.betas}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> 'TrainConfig':
        objective = config_dict.get("objective", "mdpo")
        objective_config = config_dict.get("objective_config")
        if isinstance(objective_config, dict):
            objective_config = ObjectiveConfig.from_dict(objective_config)
        elif objective_config is None:
            objective_config = ObjectiveConfig.for_method(objective)
        return cls(
            optimizer=config_dict.get("optimizer", "adam"),
            learning_rate=float(config_dict.get("learning_rate", 1e-4)),
            betas=tuple(config_dict.get("betas", (0.9, 0.999))),
            epsilon=float(config_dict.get("epsilon", 1e-8)),
            steps=int(config_dict.get("steps", 500)),
            batch_size=int(config_dict.get("batch_size", 16)),
            seed=int(config_dict.get("seed", config.SEED)),
            objective=objective,
            objective_config=objective_config,
            log_every=int(config_dict.get("log_every", 100)),
        )


@dataclass
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def fresh(cls, size: int) -> 'AdamState':
        return cls(step=0, m=np.zeros(size), v=np.zeros(size))


def adam_step(
    params: np.ndarray, grad: np.ndarray, state: AdamState, config: TrainConfig
) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    beta1, beta2 = config.betas
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    new_params = params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return new_params, AdamState(step, m, v)


def sgd_step(params: np.ndarray, grad: np.ndarray, config: TrainConfig) -> np.ndarray:
    if params.shape != grad.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grad {grad.shape}")
    return params - config.learning_rate * grad


@dataclass
class StepRecord:
    step: int
    loss: float
    grad_norm: float


@dataclass
class TrainHistory:
    records: List[StepRecord]
    final_snapshot: PolicySnapshot

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.step, r.loss, r.grad_norm) for r in self.records],
            columns=["step", "loss", "grad_norm"],
        )

    def save_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


class BatchSampler:
    """Seeded mini-batches without replacement within each epoch."""

    def __init__(self, size: int, batch_size: int, seed: int):
        self.size = size
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(size)
        self.position = 0
        self.epoch = 0

    def next_batch(self) -> np.ndarray:
        batch = self.order[self.position:self.position + self.batch_size]
        self.position += self.batch_size
        if self.position >= self.size:
            self.order = self.rng.permutation(self.size)
            self.position = 0
            self.epoch += 1
        return batch


def _validate_dataset(dataset: Sequence[Any], objective: str) -> None:
    if not dataset:
        raise ValueError("empty dataset")
    if objective == "sft":
        for item in dataset:
            if not (isinstance(item, tuple) and len(item) == 2
                    and isinstance(item[0], IntervalPrompt) and isinstance(item[1], Response)):
                raise ValueError("sft expects (prompt, response) pairs")
        return
    for record in dataset:
        if not isinstance(record, PreferenceRecord):
            raise ValueError(f"{objective} expects PreferenceRecord items")
        if objective in ("dpo", "ipo") and (record.chosen.k != 1 or record.rejected.k != 1):
            raise ValueError(
                f"{objective} needs k=1 records, prompt {record.prompt.id} has "
                f"{record.chosen.k}/{record.rejected.k}; use m{objective}"
            )


def train(
    policy: SoftmaxPolicy,
    ref: Optional[Reference],
    dataset: Sequence[Any],
    config: TrainConfig,
) -> TrainHistory:
    """
    Optimize the policy in place.

    Args:
        policy: policy to update
        ref: frozen reference; may be None for sft
        dataset: (prompt, response) pairs for sft, PreferenceRecords otherwise
        config: optimizer, objective and loop settings

    Returns:
        TrainHistory with one record per step and a snapshot of the final policy
    """
    _validate_dataset(dataset, config.objective)
    if config.objective != "sft" and ref is None:
        raise ValueError(f"{config.objective} requires a reference policy")

    logger.info(
        f"Training {policy.kind} policy: objective={config.objective}, optimizer={config.optimizer}, "
        f"lr={config.learning_rate}, steps={config.steps}, batch_size={config.batch_size}, "
        f"records={len(dataset)}, seed={config.seed}"
    )
    sampler = BatchSampler(len(dataset), config.batch_size, config.seed)
    state = AdamState.fresh(policy.num_params)
    records: List[StepRecord] = []

    for step in range(1, config.steps + 1):
        batch = [dataset[i] for i in sampler.next_batch()]
        value = batch_objective(policy, ref, batch, config.objective, config.objective_config)
        grad_norm = float(np.linalg.norm(value.gradient))
        if not np.isfinite(value.loss) or not np.isfinite(grad_norm):
            logger.error(f"Non-finite objective at step {step}: loss={value.loss}, grad_norm={grad_norm}")
            raise TrainingAbortedError(step, f"loss={value.loss}, grad_norm={grad_norm}")

        if config.optimizer == "adam":
            new_params, state = adam_step(policy.params, value.gradient, state, config)
        else:
            new_params = sgd_step(policy.params, value.gradient, config)
        policy.params[:] = new_params

        records.append(StepRecord(step, float(value.loss), grad_norm))
        if step % config.log_every == 0 or step == config.steps:
            logger.info(f"Step {step}/{config.steps}: loss={value.loss:.6f}, grad_norm={grad_norm:.6f}")
        else:
            logger.debug(f"Step {step}: loss={value.loss:.6f}, grad_norm={grad_norm:.6f}")

    return TrainHistory(records, policy.snapshot())
