"""
Experiment reports, output writers and the simulation drivers.

Every driver is a pure function of its config: re-running with the same seed
rewrites byte-identical files.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Type, TypeVar, Union

import numpy as np
import pandas as pd

from src.config import config
from src.handlers.compare_handler import QualityDistribution, empirical_correct_label_rate, range_width
from src.handlers.dataset_handler import read_jsonl
from src.handlers.estimator_handler import StudyConfig, bias_study, variance_scaling_study
from src.handlers.metrics_handler import (
    entropy_win_rate,
    kl_to_uniform,
    out_of_interval_mass,
    tv_to_uniform,
)
from src.handlers.policy_handler import IntervalPrompt, PreferenceRecord, load_policy

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class ExperimentReport:
    name: str
    config: Dict[str, Any]
    rows: List[Dict[str, Any]]
    outputs: Dict[str, Path] = field(default_factory=dict)

    def __post_init__(self):
        for row in self.rows:
            for key, value in row.items():
                if isinstance(value, (float, np.floating)) and not np.isfinite(value):
                    raise ValueError(f"non-finite value in {self.name} report: {key}={value}")

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def metric(self, name: str) -> float:
        """Value of a metric/value summary row."""
        for row in self.rows:
            if row.get("metric") == name:
                return row["value"]
        raise KeyError(f"metric not in {self.name} report: {name}")


def config_from_dict(cls: Type[T], data: Dict[str, Any]) -> T:
    """Build a config dataclass, rejecting unknown keys."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} settings: {sorted(unknown)}")
    return cls(**data)


def config_echo(value: Any) -> Any:
    """JSON-friendly copy of a (possibly nested) config."""
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: config_echo(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, dict):
        return {str(k): config_echo(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [config_echo(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def write_config(cfg: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_echo(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def summary_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=["metric", "value"])


def unique_prompts(records: Sequence[PreferenceRecord]) -> List[IntervalPrompt]:
    seen = {}
    for record in records:
        seen.setdefault(record.prompt.id, record.prompt)
    return list(seen.values())


def mean_kl(policy, prompts: Sequence[IntervalPrompt]) -> float:
    """Mean interval-restricted KL to uniform."""
    return float(np.mean([kl_to_uniform(policy.restricted_distribution(p)) for p in prompts]))


def policy_metrics(policy, prompts: Sequence[IntervalPrompt]) -> pd.DataFrame:
    """Per-prompt calibration metrics of one policy."""
    rows = []
    for prompt in prompts:
        restricted = policy.restricted_distribution(prompt)
        rows.append({
            "prompt_id": prompt.id,
            "lo": prompt.lo,
            "hi": prompt.hi,
            "kl": kl_to_uniform(restricted),
            "tv": tv_to_uniform(restricted),
            "out_mass": out_of_interval_mass(policy, prompt),
        })
    return pd.DataFrame(rows)


@dataclass
class EstimatorExperimentConfig:
    study: StudyConfig = field(default_factory=StudyConfig)
    variance_sizes: List[int] = field(default_factory=lambda: [8, 16, 32, 64, 128, 256, 512])
    out_dir: Path = config.OUTPUT_DIR

    def __post_init__(self):
        if isinstance(self.study, dict):
            self.study = StudyConfig.from_dict(self.study)
        self.out_dir = Path(self.out_dir)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EstimatorExperimentConfig':
        return config_from_dict(cls, data)


def run_estimator_experiment(cfg: EstimatorExperimentConfig) -> ExperimentReport:
    """Bias study over cfg.study.sample_sizes and variance scaling over cfg.variance_sizes."""
    seed = cfg.study.seed
    bias = bias_study(cfg.study)
    variance = variance_scaling_study(dataclasses.replace(cfg.study, sample_sizes=list(cfg.variance_sizes)))
    rows = [{"metric": "true_value", "value": bias.true_value}]
    if variance.slope is not None:
        rows.append({"metric": "variance_slope", "value": variance.slope})
    else:
        logger.warning("Variance slope undefined; omitted from summary")
    ratios = variance.table["var_ratio"].dropna()
    if not ratios.empty:
        rows.append({"metric": "var_ratio_min", "value": float(ratios.min())})
        rows.append({"metric": "var_ratio_max", "value": float(ratios.max())})
    outputs = {
        "bias": write_csv(bias.table, cfg.out_dir / f"estimator_bias_seed{seed}.csv"),
        "variance": write_csv(variance.table, cfg.out_dir / f"estimator_variance_seed{seed}.csv"),
        "summary": write_csv(summary_frame(rows), cfg.out_dir / f"estimator_summary_seed{seed}.csv"),
        "config": write_config(cfg, cfg.out_dir / f"estimator_config_seed{seed}.json"),
    }
    return ExperimentReport("estimator", config_echo(cfg), rows, outputs)


@dataclass
class CompareExperimentConfig:
    x: QualityDistribution = field(default_factory=lambda: QualityDistribution("uniform", 0.2, 1.2))
    y: QualityDistribution = field(default_factory=lambda: QualityDistribution("uniform", 0.0, 1.0))
    ks: List[int] = field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64])
    trials: int = config.MC_TRIALS
    seed: int = config.SEED
    out_dir: Path = config.OUTPUT_DIR

    def __post_init__(self):
        if isinstance(self.x, dict):
            self.x = QualityDistribution.from_dict(self.x)
        if isinstance(self.y, dict):
            self.y = QualityDistribution.from_dict(self.y)
        self.out_dir = Path(self.out_dir)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CompareExperimentConfig':
        return config_from_dict(cls, data)


def run_compare_experiment(cfg: CompareExperimentConfig) -> ExperimentReport:
    """Group-sum label accuracy against the Hoeffding floor for every k."""
    width = range_width(cfg.x, cfg.y)
    logger.info(f"Label study: E[X]={cfg.x.mean:.4f}, E[Y]={cfg.y.mean:.4f}, range width {width:.4f}")
    rows = [
        empirical_correct_label_rate(cfg.x, cfg.y, k, cfg.trials, cfg.seed).to_row()
        for k in cfg.ks
    ]
    echo = config_echo(cfg)
    echo["range_width"] = width
    outputs = {
        "labels": write_csv(pd.DataFrame(rows), cfg.out_dir / f"compare_labels_seed{cfg.seed}.csv"),
        "config": write_config(echo, cfg.out_dir / f"compare_config_seed{cfg.seed}.json"),
    }
    return ExperimentReport("compare", echo, rows, outputs)


def evaluate_policies(
    policy_a_path: Union[str, Path],
    policy_b_path: Union[str, Path],
    dataset_path: Union[str, Path],
    out_dir: Optional[Path] = None,
) -> ExperimentReport:
    """Entropy win rate of policy A over policy B plus calibration metrics for both."""
    out_dir = Path(out_dir or config.OUTPUT_DIR)
    policy_a = load_policy(policy_a_path)
    policy_b = load_policy(policy_b_path)
    prompts = unique_prompts(read_jsonl(dataset_path))
    rows: List[Dict[str, Any]] = []
    for support in ("interval", "full"):
        report = entropy_win_rate(policy_a, policy_b, prompts, support)
        rows.extend([
            {"metric": f"win_rate_{support}", "value": report.win_rate},
            {"metric": f"wins_{support}", "value": report.wins},
            {"metric": f"losses_{support}", "value": report.losses},
            {"metric": f"ties_{support}", "value": report.ties},
        ])
    for label, policy in (("a", policy_a), ("b", policy_b)):
        frame = policy_metrics(policy, prompts)
        rows.extend([
            {"metric": f"mean_kl_{label}", "value": float(frame["kl"].mean())},
            {"metric": f"mean_tv_{label}", "value": float(frame["tv"].mean())},
            {"metric": f"mean_out_mass_{label}", "value": float(frame["out_mass"].mean())},
        ])
    echo = {"policy_a": str(policy_a_path), "policy_b": str(policy_b_path), "dataset": str(dataset_path)}
    outputs = {
        "summary": write_csv(summary_frame(rows), out_dir / "eval_summary.csv"),
        "config": write_config(echo, out_dir / "eval_config.json"),
    }
    return ExperimentReport("eval", echo, rows, outputs)
