import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

from src.config import ConfigError, config
from src.handlers.dataset_handler import RngDatasetConfig, build_rng_dataset, write_jsonl
from src.handlers.experiment_handler import (
    CompareExperimentConfig,
    EstimatorExperimentConfig,
    ExperimentReport,
    evaluate_policies,
    run_compare_experiment,
    run_estimator_experiment,
)
from src.handlers.rng_experiment_handler import (
    NoiseExperimentConfig,
    RngExperimentConfig,
    run_group_size_ablation,
    run_iterative_experiment,
    run_noise_robustness_experiment,
    run_rng_experiment,
)
from src.templates.experiment_catalog import ExperimentCatalog, ExperimentPreset

logger = logging.getLogger(__name__)

# Overrides routed into a noise preset's nested "training" section
TRAINING_KEYS = {"method", "beta", "tau", "nll_coeff", "learning_rate", "steps", "batch_size", "policy_kind"}


class ExperimentRunner:
    """Resolves a preset for a command, applies overrides and runs the matching driver"""

    def __init__(self, config_path: Optional[Path] = None):
        self.catalog = ExperimentCatalog(config_path or config.EXPERIMENTS_CONFIG_PATH)

    def resolve(self, command: str, kind: str, selectors: Optional[Dict[str, Any]] = None) -> Tuple[str, ExperimentPreset]:
        selector = {"command": command}
        selector.update({key: value for key, value in (selectors or {}).items() if value is not None})
        name = self.catalog.determine_preset(selector)
        preset = self.catalog.get_preset(name)
        if preset.kind != kind:
            raise ConfigError(f"Preset {name} has kind {preset.kind}, command {command} needs {kind}")
        return name, preset

    def build_dataset(self, out_path: Path, split: str = "train", **overrides: Any) -> Path:
        _, preset = self.resolve("dataset", "dataset", {"split": split})
        params = preset.merged({**overrides, "split": split})
        records = build_rng_dataset(RngDatasetConfig.from_dict(params))
        return write_jsonl(records, out_path)

    def _rng_config(self, command: str, kind: str, overrides: Dict[str, Any]) -> Tuple[RngExperimentConfig, Dict[str, Any]]:
        _, preset = self.resolve(command, kind, {"method": overrides.get("method")})
        params = preset.merged(overrides)
        extras = {key: params.pop(key) for key in ("rounds",) if key in params}
        return RngExperimentConfig.from_dict(params), extras

    def train(self, dataset_path: Path, test_path: Optional[Path] = None, **overrides: Any) -> ExperimentReport:
        cfg, _ = self._rng_config("train", "rng", overrides)
        return run_rng_experiment(dataset_path, cfg, test_path)

    def iterate(self, dataset_path: Path, rounds: Optional[int] = None, **overrides: Any) -> ExperimentReport:
        cfg, extras = self._rng_config("iterate", "iterative", overrides)
        return run_iterative_experiment(dataset_path, rounds or int(extras.get("rounds", 3)), cfg)

    def ablate(self, ks: Optional[Sequence[int]] = None, **overrides: Any) -> ExperimentReport:
        _, preset = self.resolve("ablate-k", "ablation", {"method": overrides.get("method")})
        params = preset.merged(overrides, section="training")
        dataset_params = dict(params.get("dataset", {}))
        if overrides.get("seed") is not None:
            dataset_params["seed"] = overrides["seed"]
        return run_group_size_ablation(
            list(ks or params.get("ks", [1, 5])),
            RngDatasetConfig.from_dict(dataset_params),
            RngExperimentConfig.from_dict(params.get("training", {})),
        )

    def simulate_noise(self, noise_free: Optional[bool] = None, **overrides: Any) -> ExperimentReport:
        _, preset = self.resolve("sim-noise", "noise", {"method": overrides.get("method")})
        training = {key: value for key, value in overrides.items() if key in TRAINING_KEYS}
        params = preset.merged(training, section="training")
        seeds = params.get("seeds", [0, 1, 2, 3, 4])
        if overrides.get("seed") is not None:
            params["seeds"] = [overrides["seed"] + i for i in range(len(seeds))]
        for key in ("k", "out_dir"):
            if overrides.get(key) is not None:
                params[key] = overrides[key]
        if noise_free is not None:
            params["noise_free"] = noise_free
        return run_noise_robustness_experiment(NoiseExperimentConfig.from_dict(params))

    def simulate_estimator(self, config_path: Optional[Path] = None, **overrides: Any) -> ExperimentReport:
        _, preset = self.resolve("sim-estimator", "estimator")
        if config_path is not None:
            preset = preset.overlaid(ExperimentPreset.load_params(config_path))
        study = {key: overrides.get(key) for key in ("seed", "trials")}
        params = preset.merged(study, section="study")
        if overrides.get("out_dir") is not None:
            params["out_dir"] = overrides["out_dir"]
        return run_estimator_experiment(EstimatorExperimentConfig.from_dict(params))

    def simulate_compare(self, config_path: Optional[Path] = None, **overrides: Any) -> ExperimentReport:
        _, preset = self.resolve("sim-compare", "compare")
        if config_path is not None:
            preset = preset.overlaid(ExperimentPreset.load_params(config_path))
        return run_compare_experiment(CompareExperimentConfig.from_dict(preset.merged(overrides)))

    def evaluate(self, policy_a: Path, policy_b: Path, dataset_path: Path,
                 out_dir: Optional[Path] = None) -> ExperimentReport:
        logger.info(f"Evaluating {policy_a} against {policy_b}")
        return evaluate_policies(policy_a, policy_b, dataset_path, out_dir)
