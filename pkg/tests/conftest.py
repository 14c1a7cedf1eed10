from pathlib import Path
from typing import Callable, List

import numpy as np
import pytest

from src.handlers.policy_handler import (
    IntervalPrompt,
    LinearSoftmaxPolicy,
    PreferenceRecord,
    SampleGroup,
    TabularPolicy,
)

SMALL_VOCAB = 64

SMALL_CATALOG = """
experiments:
  dataset_train:
    kind: dataset
    conditions: {command: dataset, split: train}
    params: {a_range: [0, 40], gap_range: [5, 10], records: 24, k: 3, vocab_size: 64}
  dataset_test:
    kind: dataset
    conditions: {command: dataset, split: test}
    params: {a_range: [0, 40], records: 8, k: 3, vocab_size: 64}
  rng:
    kind: rng
    conditions: {command: train}
    params:
      method: mdpo
      vocab_size: 64
      learning_rate: 0.01
      steps: 60
      batch_size: 8
      baseline: false
      sft: {steps: 60, learning_rate: 0.1, batch_size: 64, samples_per_prompt: 20}
  iterative:
    kind: iterative
    conditions: {command: iterate}
    params:
      rounds: 2
      vocab_size: 64
      learning_rate: 0.01
      steps: 40
      batch_size: 8
      baseline: false
      sft: {steps: 60, learning_rate: 0.1, batch_size: 64, samples_per_prompt: 20}
  ablation:
    kind: ablation
    conditions: {command: ablate-k}
    params:
      ks: [1, 2]
      dataset: {a_range: [0, 40], gap_range: [5, 10], records: 16, vocab_size: 64}
      training:
        vocab_size: 64
        learning_rate: 0.01
        steps: 30
        batch_size: 8
        baseline: false
        sft: {steps: 40, learning_rate: 0.1, batch_size: 64, samples_per_prompt: 20}
  noise:
    kind: noise
    conditions: {command: sim-noise}
    params:
      k: 3
      seeds: [0, 1]
      records: 12
      a_range: [0, 40]
      training:
        method: mdpo
        vocab_size: 64
        learning_rate: 0.01
        steps: 30
        batch_size: 8
        baseline: false
        sft: {steps: 40, learning_rate: 0.1, batch_size: 64, samples_per_prompt: 20}
  estimator:
    kind: estimator
    conditions: {command: sim-estimator}
    params:
      study: {sample_sizes: [2, 4], trials: 2000}
      variance_sizes: [4, 8]
  compare:
    kind: compare
    conditions: {command: sim-compare}
    params:
      x: {family: uniform, lo: 0.2, hi: 1.2}
      y: {family: uniform, lo: 0.0, hi: 1.0}
      ks: [1, 4]
      trials: 2000
"""


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def prompts() -> List[IntervalPrompt]:
    return [IntervalPrompt(0, 1, 4), IntervalPrompt(1, 3, 7)]


@pytest.fixture
def random_tabular(prompts) -> Callable[..., TabularPolicy]:
    def build(rng: np.random.Generator, vocab_size: int = 8, scale: float = 1.0) -> TabularPolicy:
        logits = rng.normal(0.0, scale, size=(len(prompts), vocab_size))
        return TabularPolicy([p.id for p in prompts], vocab_size=vocab_size, logits=logits)
    return build


@pytest.fixture
def random_linear() -> Callable[..., LinearSoftmaxPolicy]:
    def build(rng: np.random.Generator, vocab_size: int = 8, scale: float = 1.0) -> LinearSoftmaxPolicy:
        return LinearSoftmaxPolicy(vocab_size=vocab_size, weights=rng.normal(0.0, scale, size=5))
    return build


@pytest.fixture
def random_record(prompts) -> Callable[..., PreferenceRecord]:
    def build(rng: np.random.Generator, k_w: int, k_l: int, vocab_size: int = 8) -> PreferenceRecord:
        prompt = prompts[int(rng.integers(len(prompts)))]
        return PreferenceRecord(
            prompt,
            SampleGroup.from_tokens(rng.integers(0, vocab_size, size=k_w)),
            SampleGroup.from_tokens(rng.integers(0, vocab_size, size=k_l)),
        )
    return build


@pytest.fixture
def small_catalog(tmp_path) -> Path:
    path = tmp_path / "experiments_config.yaml"
    path.write_text(SMALL_CATALOG, encoding="utf-8")
    return path

