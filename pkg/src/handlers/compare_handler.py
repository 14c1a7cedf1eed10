"""
Group-level preference labels and how often they are correct.

Comparing sums of k bounded quality scores gets the right answer more often as
k grows; the Hoeffding bound gives a floor for that probability.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Sequence

import numpy as np
from scipy.special import expit

from src.handlers.estimator_handler import BLOCK_ELEMENTS, block_rng

logger = logging.getLogger(__name__)

LINKS = ("sigmoid",)
QUALITY_FAMILIES = ("uniform", "bernoulli-scaled", "discrete")


@dataclass(frozen=True)
class QualityDistribution:
    """
    Bounded per-response quality score.

    Families:
        uniform: continuous on [lo, hi]
        bernoulli-scaled: hi with probability params["p"], lo otherwise
        discrete: params["values"] with params["probs"], all inside [lo, hi]
    """
    family: str
    lo: float
    hi: float
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in QUALITY_FAMILIES:
            raise ValueError(f"Unknown quality family: {self.family}")
        if not self.lo < self.hi:
            raise ValueError(f"quality bounds need lo < hi, got [{self.lo}, {self.hi}]")
        if self.family == "bernoulli-scaled" and not 0.0 <= self.params.get("p", -1.0) <= 1.0:
            raise ValueError("bernoulli-scaled quality needs params['p'] in [0, 1]")
        if self.family == "discrete":
            values = np.asarray(self.params.get("values", []), dtype=float)
            if values.size == 0 or values.min() < self.lo or values.max() > self.hi:
                raise ValueError(f"discrete quality values must lie in [{self.lo}, {self.hi}]")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'QualityDistribution':
        return cls(
            family=data["family"],
            lo=float(data["lo"]),
            hi=float(data["hi"]),
            params=dict(data.get("params", {})),
        )

    @property
    def mean(self) -> float:
        if self.family == "uniform":
            return (self.lo + self.hi) / 2
        if self.family == "bernoulli-scaled":
            return self.lo + self.params["p"] * (self.hi - self.lo)
        return float(np.dot(self.params["probs"], self.params["values"]))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.family == "uniform":
            return rng.uniform(self.lo, self.hi, size=size)
        if self.family == "bernoulli-scaled":
            return np.where(rng.random(size) < self.params["p"], self.hi, self.lo)
        values = np.asarray(self.params["values"], dtype=float)
        return rng.choice(values, size=size, p=self.params["probs"])


@dataclass
class LabelStudyResult:
    k: int
    empirical_accuracy: float
    hoeffding_bound: float
    trials: int
    seed: int
    range_width: float

    @property
    def standard_error(self) -> float:
        acc = self.empirical_accuracy
        return float(np.sqrt(acc * (1 - acc) / self.trials))

    def to_row(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "empirical_accuracy": self.empirical_accuracy,
            "hoeffding_bound": self.hoeffding_bound,
            "trials": self.trials,
            "seed": self.seed,
        }


def group_pref_prob(margin: float, link: str = "sigmoid") -> float:
    """Probability that the first group is preferred given its reward margin."""
    if link not in LINKS:
        raise ValueError(f"Unknown link function: {link}")
    return float(expit(margin))


def label_by_group_sum(xs: Sequence[float], ys: Sequence[float]) -> bool:
    """True iff sum(xs) > sum(ys); ties are False."""
    if len(xs) != len(ys):
        raise ValueError(f"group sizes differ: {len(xs)} vs {len(ys)}")
    if len(xs) == 0:
        raise ValueError("empty group")
    return bool(np.sum(xs) > np.sum(ys))


def range_width(x: QualityDistribution, y: QualityDistribution) -> float:
    """Width of the support of X - Y."""
    return (x.hi - y.lo) - (x.lo - y.hi)


def hoeffding_lower_bound(delta: float, range_width: float, k: int) -> float:
    """Lower bound on P(sum of k X > sum of k Y) when E[X] - E[Y] = delta."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if not range_width > 0:
        raise ValueError(f"range_width must be positive, got {range_width}")
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    return max(0.0, 1.0 - float(np.exp(-2.0 * k * delta ** 2 / range_width ** 2)))


def empirical_correct_label_rate(
    x: QualityDistribution,
    y: QualityDistribution,
    k: int,
    trials: int,
    seed: int,
) -> LabelStudyResult:
    """Fraction of trials in which the group-sum labeler prefers the better source."""
    delta = x.mean - y.mean
    if not delta > 0:
        raise ValueError(f"remark precondition violated: E[X] = {x.mean} is not above E[Y] = {y.mean}")
    if k < 1 or trials < 1:
        raise ValueError(f"k and trials must be positive, got k={k}, trials={trials}")
    width = range_width(x, y)
    correct = 0
    block_size = max(1, BLOCK_ELEMENTS // k)
    for block, start in enumerate(range(0, trials, block_size)):
        rows = min(block_size, trials - start)
        rng = block_rng(seed, k, block)
        xs = x.sample(rng, (rows, k))
        ys = y.sample(rng, (rows, k))
        correct += int(np.count_nonzero(xs.sum(axis=1) > ys.sum(axis=1)))
    result = LabelStudyResult(
        k=k,
        empirical_accuracy=correct / trials,
        hoeffding_bound=hoeffding_lower_bound(delta, width, k),
        trials=trials,
        seed=seed,
        range_width=width,
    )
    logger.debug(f"Label study k={k}: accuracy {result.empirical_accuracy:.4f}, bound {result.hoeffding_bound:.4f}")
    return result
