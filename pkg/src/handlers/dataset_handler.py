"""
Random-number-generation preference data.

Each prompt asks for an integer in [lo, hi]. Chosen groups are uniform draws from
the interval; rejected groups come from a non-uniform family concentrated on
the interval's bias token lo + (7 mod size).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Sequence, Tuple, Union

import numpy as np

from src.config import config
from src.handlers.policy_handler import IntervalPrompt, PreferenceRecord, Response, SampleGroup

logger = logging.getLogger(__name__)

REJECTED_FAMILIES = ("point-mass", "geometric-tilt", "mixture")
SPLITS = ("train", "test")

BIAS_OFFSET = 7
GEOMETRIC_RATIO = 0.5
MIXTURE_BIAS_MASS = 0.6


@dataclass
class RngDatasetConfig:
    a_range: Tuple[int, int] = (0, 1000)
    gap_range: Tuple[int, int] = (5, 10)
    records: int = 3000
    k: int = 5
    rejected_family: str = "point-mass"
    split: str = "train"
    seed: int = config.SEED
    vocab_size: int = config.VOCAB_SIZE
    first_id: int = 0

    def __post_init__(self):
        self.a_range = (int(self.a_range[0]), int(self.a_range[1]))
        self.gap_range = (int(self.gap_range[0]), int(self.gap_range[1]))
        if self.rejected_family not in REJECTED_FAMILIES:
            raise ValueError(f"Unknown rejected family: {self.rejected_family}")
        if self.split not in SPLITS:
            raise ValueError(f"Unknown split: {self.split}")
        if self.records < 1 or self.k < 1:
            raise ValueError(f"records and k must be positive, got {self.records}, {self.k}")
        a_lo, a_hi = self.a_range
        if a_lo < 0 or a_lo > a_hi:
            raise ValueError(f"invalid a_range {self.a_range}")
        if self.split == "train":
            g_lo, g_hi = self.gap_range
            if g_lo < 1 or g_lo > g_hi:
                raise ValueError(f"invalid gap_range {self.gap_range}: gaps must be >= 1")
            if a_hi + g_hi >= self.vocab_size:
                raise ValueError(f"intervals up to {a_hi + g_hi} exceed vocab {self.vocab_size}")
        else:
            if a_lo >= a_hi:
                raise ValueError(f"test split needs a_range with room for hi > lo, got {self.a_range}")
            if a_hi >= self.vocab_size:
                raise ValueError(f"intervals up to {a_hi} exceed vocab {self.vocab_size}")

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> 'RngDatasetConfig':
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(config_dict) - known
        if unknown:
            raise ValueError(f"Unknown dataset settings: {sorted(unknown)}")
        return cls(**config_dict)


def bias_token(prompt: IntervalPrompt) -> int:
    return prompt.lo + BIAS_OFFSET % prompt.size


def rejected_distribution(prompt: IntervalPrompt, family: str) -> np.ndarray:
    """Probabilities over the interval's tokens lo..hi."""
    size = prompt.size
    bias = bias_token(prompt) - prompt.lo
    if family == "point-mass":
        probs = np.zeros(size)
        probs[bias] = 1.0
    elif family == "geometric-tilt":
        probs = GEOMETRIC_RATIO ** np.arange(size)
        probs /= probs.sum()
    elif family == "mixture":
        probs = skewed_distribution(size, bias, MIXTURE_BIAS_MASS)
    else:
        raise ValueError(f"Unknown rejected family: {family}")
    return probs


def skewed_distribution(size: int, bias: int, bias_mass: float) -> np.ndarray:
    """bias_mass on one offset, the rest spread uniformly over the other offsets."""
    if not 0.0 <= bias_mass <= 1.0:
        raise ValueError(f"bias mass must lie in [0, 1], got {bias_mass}")
    if size == 1:
        return np.ones(1)
    probs = np.full(size, (1.0 - bias_mass) / (size - 1))
    probs[bias] = bias_mass
    return probs


def sample_interval_prompts(cfg: RngDatasetConfig, rng: np.random.Generator) -> List[IntervalPrompt]:
    a_lo, a_hi = cfg.a_range
    prompts = []
    for i in range(cfg.records):
        if cfg.split == "train":
            lo = int(rng.integers(a_lo, a_hi + 1))
            hi = lo + int(rng.integers(cfg.gap_range[0], cfg.gap_range[1] + 1))
        else:
            lo = int(rng.integers(a_lo, a_hi))
            hi = int(rng.integers(lo + 1, a_hi + 1))
        prompts.append(IntervalPrompt(cfg.first_id + i, lo, hi))
    return prompts


def build_rng_dataset(cfg: RngDatasetConfig) -> List[PreferenceRecord]:
    """Uniform chosen groups against rejected groups from cfg.rejected_family."""
    rng = np.random.default_rng(cfg.seed)
    prompts = sample_interval_prompts(cfg, rng)
    records = []
    for prompt in prompts:
        chosen = rng.integers(prompt.lo, prompt.hi + 1, size=cfg.k)
        rejected = prompt.lo + rng.choice(prompt.size, size=cfg.k,
                                          p=rejected_distribution(prompt, cfg.rejected_family))
        records.append(PreferenceRecord(
            prompt=prompt,
            chosen=SampleGroup.from_tokens(chosen),
            rejected=SampleGroup.from_tokens(rejected),
        ))
    logger.info(
        f"Built {len(records)} {cfg.split} records (k={cfg.k}, rejected={cfg.rejected_family}, seed={cfg.seed})"
    )
    return records


def stratified_tokens(prompt: IntervalPrompt, probs: np.ndarray, count: int,
                      rng: np.random.Generator) -> np.ndarray:
    """
    Systematic sampling from probs over lo..hi.

    Each token appears within one of count * prob times, so small SFT sets keep
    the intended skew.
    """
    points = (rng.random() + np.arange(count)) / count
    offsets = np.searchsorted(np.cumsum(probs), points, side="right")
    return prompt.lo + np.minimum(offsets, prompt.size - 1)


def biased_sft_examples(
    prompts: Sequence[IntervalPrompt],
    bias_mass: float,
    samples_per_prompt: int,
    seed: int,
    bias_token_rule: Callable[[IntervalPrompt], int] = bias_token,
) -> List[Tuple[IntervalPrompt, Response]]:
    """(prompt, response) pairs with bias_mass on each prompt's bias token."""
    rng = np.random.default_rng(seed)
    examples = []
    for prompt in prompts:
        token = bias_token_rule(prompt)
        if not prompt.contains(token):
            raise ValueError(f"bias token {token} outside [{prompt.lo}, {prompt.hi}] for prompt {prompt.id}")
        probs = skewed_distribution(prompt.size, token - prompt.lo, bias_mass)
        for sampled in stratified_tokens(prompt, probs, samples_per_prompt, rng):
            examples.append((prompt, Response.single(int(sampled))))
    return examples


def write_jsonl(records: Sequence[PreferenceRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record.to_dict()) + "\n")
    logger.info(f"Wrote {len(records)} records to {path}")
    return path


def read_jsonl(path: Union[str, Path]) -> List[PreferenceRecord]:
    path = Path(path)
    if not path.exists():
        logger.error(f"Dataset file not found: {path}")
        raise FileNotFoundError(f"Dataset file not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(PreferenceRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, ValueError, TypeError) as e:
                logger.error(f"Failed to parse {path}:{line_number}: {e}")
                raise ValueError(f"Invalid record at {path}:{line_number}: {e}")
    if not records:
        raise ValueError(f"Dataset file is empty: {path}")
    return records
