"""Calibration and diversity metrics."""

import logging
from dataclasses import dataclass
from typing import Hashable, List, Optional, Sequence, Union

import numpy as np
from scipy.special import entr, rel_entr

from src.handlers.policy_handler import IntervalPrompt

logger = logging.getLogger(__name__)

SUPPORTS = ("interval", "full")


@dataclass(frozen=True)
class CategoryCounts:
    counts: Sequence[int]

    def __post_init__(self):
        if any(int(n) < 0 for n in self.counts):
            raise ValueError(f"category counts must be non-negative: {list(self.counts)}")

    @property
    def total(self) -> int:
        return int(sum(int(n) for n in self.counts))


@dataclass
class WinRateReport:
    wins: int
    losses: int
    ties: int

    @property
    def compared(self) -> int:
        return self.wins + self.losses + self.ties

    @property
    def win_rate(self) -> float:
        """Ties count in the denominator."""
        return self.wins / self.compared if self.compared else 0.0


def _as_distribution(dist: Sequence[float]) -> np.ndarray:
    p = np.asarray(dist, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("distribution must be a non-empty vector")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"not a probability distribution (sum {p.sum():.12f})")
    return p


def entropy(dist: Sequence[float]) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    return float(entr(_as_distribution(dist)).sum())


def kl_to_uniform(dist: Sequence[float], support_size: Optional[int] = None) -> float:
    """KL(p || uniform over support_size outcomes); entries beyond len(dist) are zero."""
    p = _as_distribution(dist)
    n = support_size or p.size
    if n < p.size:
        raise ValueError(f"support_size {n} is smaller than the distribution ({p.size})")
    return float(rel_entr(p, 1.0 / n).sum())


def tv_to_uniform(dist: Sequence[float], support_size: Optional[int] = None) -> float:
    p = _as_distribution(dist)
    n = support_size or p.size
    if n < p.size:
        raise ValueError(f"support_size {n} is smaller than the distribution ({p.size})")
    return float(0.5 * (np.abs(p - 1.0 / n).sum() + (n - p.size) / n))


def _counts_array(counts: Union[CategoryCounts, Sequence[int]]) -> np.ndarray:
    if not isinstance(counts, CategoryCounts):
        counts = CategoryCounts(counts)
    values = np.asarray([int(n) for n in counts.counts], dtype=np.int64)
    if values.sum() < 1:
        raise ValueError("category counts must sum to at least 1")
    return values


def simpson_index(counts: Union[CategoryCounts, Sequence[int]]) -> float:
    """1 - sum_i (n_i / N)^2."""
    values = _counts_array(counts)
    shares = values / values.sum()
    return float(1.0 - np.sum(shares ** 2))


def category_kl_to_uniform(counts: Union[CategoryCounts, Sequence[int]]) -> float:
    """KL of the empirical category distribution to uniform over all listed categories."""
    values = _counts_array(counts)
    return kl_to_uniform(values / values.sum(), support_size=values.size)


def distinct_n(texts: Sequence[Union[str, Sequence[Hashable]]], n: int) -> float:
    """Distinct n-grams over total n-grams, pooled across texts; strings are split on whitespace."""
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    grams: List[tuple] = []
    for text in texts:
        tokens = text.split() if isinstance(text, str) else list(text)
        grams.extend(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))
    if not grams:
        raise ValueError(f"no {n}-grams available")
    return len(set(grams)) / len(grams)


def prompt_distribution(policy, prompt: IntervalPrompt, support: str = "interval") -> np.ndarray:
    if support == "interval":
        return policy.restricted_distribution(prompt)
    if support == "full":
        return policy.predictive_distribution(prompt)
    raise ValueError(f"Unknown support: {support}")


def out_of_interval_mass(policy, prompt: IntervalPrompt) -> float:
    """Full-vocabulary probability outside [lo, hi]."""
    dist = policy.predictive_distribution(prompt)
    return float(dist[:prompt.lo].sum() + dist[prompt.hi + 1:].sum())


def entropy_win_rate(policy_a, policy_b, prompts: Sequence[IntervalPrompt],
                     support: str = "interval") -> WinRateReport:
    """
    Count prompts on which policy_a's predictive entropy is strictly higher.

    Args:
        support: "interval" compares distributions restricted to [lo, hi] and
            renormalized; "full" compares over the whole vocabulary
    """
    wins = losses = ties = 0
    for prompt in prompts:
        h_a = entropy(prompt_distribution(policy_a, prompt, support))
        h_b = entropy(prompt_distribution(policy_b, prompt, support))
        if h_a > h_b:
            wins += 1
        elif h_a < h_b:
            losses += 1
        else:
            ties += 1
    report = WinRateReport(wins, losses, ties)
    logger.debug(f"Entropy win rate over {report.compared} prompts: {report.win_rate:.3f} ({ties} ties)")
    return report
