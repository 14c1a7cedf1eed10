"""
Squared mean-difference estimators and the Monte Carlo studies around them.

The unbiased estimator subtracts the sample-variance terms from the plug-in
squared difference; the naive estimator is the plug-in alone. Studies draw
their randomness from (seed, k, block) so every table row is reproducible on
its own.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import integrate

from src.config import config

logger = logging.getLogger(__name__)

FAMILIES = ("uniform", "normal", "point", "discrete")
TRANSFORMS = ("identity", "square", "table")

# Samples drawn per random block: trials are processed in blocks of
# max(1, BLOCK_ELEMENTS // k) so memory stays flat as k grows.
BLOCK_ELEMENTS = 1 << 20


@dataclass
class EstimatorResult:
    value: float
    mean_p: float
    mean_q: float
    svar_p: float
    svar_q: float
    n: int
    m: int


@dataclass(frozen=True)
class DistributionSpec:
    family: str
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"Unknown distribution family: {self.family}")

    @classmethod
    def from_dict(cls, spec: Dict[str, Any]) -> 'DistributionSpec':
        spec = dict(spec)
        family = spec.pop("family")
        return cls(family=family, params=spec.pop("params", spec))

    def sample(self, rng: np.random.Generator, size: Tuple[int, ...]) -> np.ndarray:
        p = self.params
        if self.family == "uniform":
            return rng.uniform(p["low"], p["high"], size=size)
        if self.family == "normal":
            return rng.normal(p["mean"], p["std"], size=size)
        if self.family == "point":
            return np.full(size, float(p["value"]))
        return rng.choice(np.asarray(p["values"], dtype=float), size=size, p=p["probs"])


@dataclass(frozen=True)
class Moments:
    """Mean and variance of f(X)."""
    mean: float
    var: float


@dataclass
class StudyConfig:
    p: DistributionSpec = field(default_factory=lambda: DistributionSpec("uniform", {"low": 0.0, "high": 2.0}))
    q: DistributionSpec = field(default_factory=lambda: DistributionSpec("uniform", {"low": -1.0, "high": 1.0}))
    transform: str = "square"
    table: Dict[float, float] = field(default_factory=dict)
    c: float = 0.0
    sample_sizes: List[int] = field(default_factory=lambda: [2, 4, 8, 16, 32, 64, 128])
    trials: int = config.MC_TRIALS
    seed: int = config.SEED

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"Unknown transform: {self.transform}")
        if self.transform == "table" and not (self.p.family == self.q.family == "discrete"):
            raise ValueError("table transform requires discrete families")
        if self.trials < 1:
            raise ValueError(f"trials must be positive, got {self.trials}")
        if not self.sample_sizes or min(self.sample_sizes) < 1:
            raise ValueError(f"every sample size must be positive, got {self.sample_sizes}")

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> 'StudyConfig':
        defaults = cls()
        return cls(
            p=DistributionSpec.from_dict(config_dict["p"]) if "p" in config_dict else defaults.p,
            q=DistributionSpec.from_dict(config_dict["q"]) if "q" in config_dict else defaults.q,
            transform=config_dict.get("transform", defaults.transform),
            table={float(k): float(v) for k, v in config_dict.get("table", {}).items()},
            c=float(config_dict.get("c", defaults.c)),
            sample_sizes=[int(k) for k in config_dict.get("sample_sizes", defaults.sample_sizes)],
            trials=int(config_dict.get("trials", defaults.trials)),
            seed=int(config_dict.get("seed", defaults.seed)),
        )

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.transform == "identity":
            return x
        if self.transform == "square":
            return x * x
        return np.vectorize(self.table.__getitem__, otypes=[float])(x)


@dataclass
class BiasStudyResult:
    table: pd.DataFrame
    true_value: float


@dataclass
class VarianceStudyResult:
    table: pd.DataFrame
    slope: Optional[float]


def _sorted(samples: Sequence[float], name: str) -> np.ndarray:
    values = np.sort(np.asarray(samples, dtype=float))
    if values.size == 0:
        raise ValueError(f"{name} must be non-empty")
    return values


def squared_diff_unbiased(samples_p: Sequence[float], samples_q: Sequence[float], c: float = 0.0) -> EstimatorResult:
    """(mean_p - mean_q - c)^2 - svar_p / n - svar_q / m, with svar 0 for a single sample."""
    xp = _sorted(samples_p, "samples_p")
    xq = _sorted(samples_q, "samples_q")
    n, m = xp.size, xq.size
    mean_p, mean_q = float(xp.mean()), float(xq.mean())
    svar_p = float(np.var(xp, ddof=1)) if n > 1 else 0.0
    svar_q = float(np.var(xq, ddof=1)) if m > 1 else 0.0
    value = (mean_p - mean_q - c) ** 2 - svar_p / n - svar_q / m
    return EstimatorResult(value, mean_p, mean_q, svar_p, svar_q, n, m)


def squared_diff_naive(samples_p: Sequence[float], samples_q: Sequence[float], c: float = 0.0) -> float:
    xp = _sorted(samples_p, "samples_p")
    xq = _sorted(samples_q, "samples_q")
    return float((xp.mean() - xq.mean() - c) ** 2)


def _raw_moment(spec: DistributionSpec, power: int) -> float:
    p = spec.params
    if spec.family == "uniform":
        a, b = float(p["low"]), float(p["high"])
        if a == b:
            return a ** power
        return (b ** (power + 1) - a ** (power + 1)) / ((power + 1) * (b - a))
    if spec.family == "normal":
        mu, s2 = float(p["mean"]), float(p["std"]) ** 2
        return {
            1: mu,
            2: mu ** 2 + s2,
            3: mu ** 3 + 3 * mu * s2,
            4: mu ** 4 + 6 * mu ** 2 * s2 + 3 * s2 ** 2,
        }[power]
    if spec.family == "point":
        return float(p["value"]) ** power
    values = np.asarray(p["values"], dtype=float)
    return float(np.dot(p["probs"], values ** power))


def closed_form_moments(spec: DistributionSpec, study: StudyConfig) -> Moments:
    """Exact mean and variance of f(X) for the configured transform."""
    if study.transform == "table":
        if spec.family != "discrete":
            raise ValueError("table transform requires a discrete family")
        fx = study.apply(np.asarray(spec.params["values"], dtype=float))
        probs = np.asarray(spec.params["probs"], dtype=float)
        mean = float(np.dot(probs, fx))
        return Moments(mean, float(np.dot(probs, (fx - mean) ** 2)))
    if study.transform == "identity":
        m1, m2 = _raw_moment(spec, 1), _raw_moment(spec, 2)
    else:
        m1, m2 = _raw_moment(spec, 2), _raw_moment(spec, 4)
    return Moments(m1, max(m2 - m1 ** 2, 0.0))


def quadrature_moments(spec: DistributionSpec, study: StudyConfig) -> Moments:
    """Numerical cross-check of closed_form_moments for uniform families."""
    if spec.family != "uniform":
        raise ValueError(f"quadrature cross-check supports uniform families only, got {spec.family}")
    a, b = float(spec.params["low"]), float(spec.params["high"])
    density = 1.0 / (b - a)

    def f(x: float) -> float:
        return float(study.apply(np.array([x]))[0])

    mean, _ = integrate.quad(lambda x: f(x) * density, a, b)
    second, _ = integrate.quad(lambda x: f(x) ** 2 * density, a, b)
    return Moments(mean, second - mean ** 2)


def predicted_variance(mp: Moments, mq: Moments, c: float, n: int, m: int) -> float:
    """
    Variance expansion of the unbiased estimator for n, m >= 2.

    Only second moments enter. For normal samples it exceeds the exact
    variance by 2 var_p^2 / n^2 + 2 var_q^2 / m^2; other families add
    third- and fourth-moment terms of order 1/k^2 that it leaves out. Both
    gaps are small next to the leading 1/k term when the mean gap is nonzero.
    """
    if n < 2 or m < 2:
        raise ValueError("variance expansion needs n, m >= 2")
    s = mp.var / n + mq.var / m
    gap = mp.mean - mq.mean - c
    return (
        2 * s ** 2
        + 4 * s * gap ** 2
        + 2 * mp.var ** 2 / (n * (n - 1))
        + 2 * mq.var ** 2 / (m * (m - 1))
    )


def leading_variance_term(mp: Moments, mq: Moments, c: float, k: int) -> float:
    return 4 * (mp.var / k + mq.var / k) * (mp.mean - mq.mean - c) ** 2


def block_rng(seed: int, k: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, k, block]))


def simulate_estimates(study: StudyConfig, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Naive and unbiased estimates for `study.trials` independent trials at n = m = k.

    Returns:
        (naive values, unbiased values), each of length trials
    """
    naive = np.empty(study.trials)
    unbiased = np.empty(study.trials)
    block_size = max(1, BLOCK_ELEMENTS // k)
    for block, start in enumerate(range(0, study.trials, block_size)):
        rows = min(block_size, study.trials - start)
        rng = block_rng(study.seed, k, block)
        xp = study.apply(study.p.sample(rng, (rows, k)))
        xq = study.apply(study.q.sample(rng, (rows, k)))
        plug_in = (xp.mean(axis=1) - xq.mean(axis=1) - study.c) ** 2
        if k > 1:
            correction = xp.var(axis=1, ddof=1) / k + xq.var(axis=1, ddof=1) / k
        else:
            correction = 0.0
        naive[start:start + rows] = plug_in
        unbiased[start:start + rows] = plug_in - correction
    return naive, unbiased


def true_value(study: StudyConfig) -> float:
    mp = closed_form_moments(study.p, study)
    mq = closed_form_moments(study.q, study)
    return (mp.mean - mq.mean - study.c) ** 2


def bias_study(study: StudyConfig) -> BiasStudyResult:
    """RMSE and mean of both estimators against the closed-form target at each k."""
    target = true_value(study)
    logger.info(f"Bias study: target {target:.6f}, sizes {study.sample_sizes}, {study.trials} trials")
    rows = []
    for k in study.sample_sizes:
        naive, unbiased = simulate_estimates(study, k)
        rows.append({
            "k": k,
            "rmse_naive": float(np.sqrt(np.mean((naive - target) ** 2))),
            "rmse_unbiased": float(np.sqrt(np.mean((unbiased - target) ** 2))),
            "mean_naive": float(naive.mean()),
            "mean_unbiased": float(unbiased.mean()),
            "se_unbiased": float(unbiased.std(ddof=1) / np.sqrt(study.trials)) if study.trials > 1 else 0.0,
        })
        logger.debug(f"Bias study row: {rows[-1]}")
    return BiasStudyResult(pd.DataFrame(rows), target)


def variance_scaling_study(study: StudyConfig) -> VarianceStudyResult:
    """
    Empirical variance of the unbiased estimator against k, with a log-log slope
    and the ratio to predicted_variance.

    The slope is None when any empirical variance is zero; the ratio is NaN
    when the predicted variance is zero.
    """
    if min(study.sample_sizes) < 2:
        raise ValueError("variance scaling study needs every k >= 2")
    mp = closed_form_moments(study.p, study)
    mq = closed_form_moments(study.q, study)
    rows = []
    for k in study.sample_sizes:
        _, unbiased = simulate_estimates(study, k)
        empirical = float(np.var(unbiased, ddof=1)) if study.trials > 1 else 0.0
        predicted = predicted_variance(mp, mq, study.c, k, k)
        rows.append({
            "k": k,
            "empirical_var": empirical,
            "predicted_var": predicted,
            "var_ratio": empirical / predicted if predicted > 0 else float("nan"),
            "predicted_leading_term": leading_variance_term(mp, mq, study.c, k),
        })
    table = pd.DataFrame(rows)
    slope = None
    if len(table) >= 2 and (table["empirical_var"] > 0).all():
        slope = float(np.polyfit(np.log(table["k"]), np.log(table["empirical_var"]), 1)[0])
        logger.info(f"Variance scaling slope: {slope:.4f}")
    else:
        logger.warning("Variance scaling slope undefined: degenerate distributions or a single size")
    return VarianceStudyResult(table, slope)
