"""
RNG calibration experiments.

A policy is first SFT-trained to favour one token per interval, then
preference-trained against that snapshot with uniform chosen groups. The
drivers here run that pipeline once, across group sizes, across rounds and
under noisy group labels.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import binomtest

from src.config import config
from src.handlers.compare_handler import label_by_group_sum
from src.handlers.dataset_handler import (
    RngDatasetConfig,
    bias_token,
    biased_sft_examples,
    build_rng_dataset,
    read_jsonl,
    sample_interval_prompts,
)
from src.handlers.experiment_handler import (
    ExperimentReport,
    config_echo,
    config_from_dict,
    mean_kl,
    policy_metrics,
    summary_frame,
    unique_prompts,
    write_config,
    write_csv,
)
from src.handlers.metrics_handler import entropy, entropy_win_rate
from src.handlers.objective_handler import PREFERENCE_METHODS, ObjectiveConfig
from src.handlers.policy_handler import (
    IntervalPrompt,
    PolicySnapshot,
    PreferenceRecord,
    SampleGroup,
    make_policy,
)
from src.handlers.trainer_handler import TrainConfig, TrainHistory, train

logger = logging.getLogger(__name__)

POLICY_KINDS = ("tabular", "linear")
MULTI_SAMPLE_METHODS = ("mdpo", "mipo")

QUALITY_RULE = (
    "per-response quality = 1 - SFT interval probability of the token (0 outside the interval) "
    "plus uniform judge noise; labels compare group sums"
)


@dataclass
class SftConfig:
    steps: int = 500
    learning_rate: float = 0.1
    batch_size: int = 256
    bias_mass: float = 0.6
    samples_per_prompt: int = 20

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SftConfig':
        return config_from_dict(cls, data)


@dataclass
class RngExperimentConfig:
    """
    Settings for one SFT + preference-training run.

    beta, tau and nll_coeff left as None fall back to the method defaults of
    ObjectiveConfig.for_method. k truncates every record's groups.
    """
    method: str = "mdpo"
    policy_kind: str = "tabular"
    k: Optional[int] = None
    beta: Optional[float] = None
    tau: Optional[float] = None
    nll_coeff: Optional[float] = None
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    steps: int = 500
    batch_size: int = 16
    seed: int = config.SEED
    vocab_size: int = config.VOCAB_SIZE
    baseline: bool = True
    sft: SftConfig = field(default_factory=SftConfig)
    out_dir: Path = config.OUTPUT_DIR

    def __post_init__(self):
        if self.method not in PREFERENCE_METHODS:
            raise ValueError(f"Unknown preference method: {self.method}")
        if self.policy_kind not in POLICY_KINDS:
            raise ValueError(f"Unknown policy kind: {self.policy_kind}")
        if self.k is not None and self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")
        if isinstance(self.sft, dict):
            self.sft = SftConfig.from_dict(self.sft)
        self.out_dir = Path(self.out_dir)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RngExperimentConfig':
        return config_from_dict(cls, data)

    def objective_config(self, method: Optional[str] = None) -> ObjectiveConfig:
        return ObjectiveConfig.for_method(
            method or self.method, beta=self.beta, tau=self.tau, nll_coeff=self.nll_coeff
        )

    def train_config(self, method: Optional[str] = None, seed: Optional[int] = None) -> TrainConfig:
        method = method or self.method
        return TrainConfig(
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            steps=self.steps,
            batch_size=self.batch_size,
            seed=self.seed if seed is None else seed,
            objective=method,
            objective_config=self.objective_config(method),
        )


def make_biased_sft_policy(
    prompts: Sequence[IntervalPrompt],
    bias_token_rule: Callable[[IntervalPrompt], int] = bias_token,
    sft_steps: int = 500,
    seed: int = 0,
    *,
    policy_kind: str = "tabular",
    vocab_size: Optional[int] = None,
    bias_mass: float = 0.6,
    learning_rate: float = 0.1,
    batch_size: int = 256,
    samples_per_prompt: int = 20,
) -> PolicySnapshot:
    """
    SFT-train a fresh policy toward each prompt's bias token.

    Returns:
        Frozen snapshot serving as both the SFT baseline and the reference
    """
    examples = biased_sft_examples(prompts, bias_mass, samples_per_prompt, seed, bias_token_rule)
    policy = make_policy(policy_kind, prompts, vocab_size)
    train_cfg = TrainConfig(
        optimizer="adam",
        learning_rate=learning_rate,
        steps=sft_steps,
        batch_size=batch_size,
        seed=seed,
        objective="sft",
        objective_config=ObjectiveConfig(),
    )
    logger.info(f"SFT on {len(prompts)} prompts with bias mass {bias_mass}")
    return train(policy, None, examples, train_cfg).final_snapshot


def _sft_snapshot(prompts: Sequence[IntervalPrompt], cfg: RngExperimentConfig, seed: int) -> PolicySnapshot:
    return make_biased_sft_policy(
        prompts,
        sft_steps=cfg.sft.steps,
        seed=seed,
        policy_kind=cfg.policy_kind,
        vocab_size=cfg.vocab_size,
        bias_mass=cfg.sft.bias_mass,
        learning_rate=cfg.sft.learning_rate,
        batch_size=cfg.sft.batch_size,
        samples_per_prompt=cfg.sft.samples_per_prompt,
    )


def _preference_train(
    sft: PolicySnapshot, records: Sequence[PreferenceRecord], cfg: RngExperimentConfig,
    method: Optional[str] = None, seed: Optional[int] = None,
) -> TrainHistory:
    return train(sft.thaw(), sft, records, cfg.train_config(method, seed))


def _group_size(records: Sequence[PreferenceRecord]) -> int:
    return max(max(r.chosen.k, r.rejected.k) for r in records)


def _load_records(path: Union[str, Path], k: Optional[int]) -> List[PreferenceRecord]:
    records = read_jsonl(path)
    if k is not None:
        records = [r.truncate(k) for r in records]
    return records


def compare_to_sft(sft, trained, prompts: Sequence[IntervalPrompt]) -> pd.DataFrame:
    """Per-prompt metrics of the SFT and trained policies side by side."""
    before = policy_metrics(sft, prompts)
    after = policy_metrics(trained, prompts)
    frame = before[["prompt_id", "lo", "hi"]].copy()
    for column in ("kl", "tv", "out_mass"):
        frame[f"{column}_sft"] = before[column]
        frame[f"{column}_trained"] = after[column]
    frame["entropy_sft"] = [entropy(sft.restricted_distribution(p)) for p in prompts]
    frame["entropy_trained"] = [entropy(trained.restricted_distribution(p)) for p in prompts]
    return frame


def _win_rows(label: str, policy_a, policy_b, prompts: Sequence[IntervalPrompt]) -> List[Dict[str, Any]]:
    report = entropy_win_rate(policy_a, policy_b, prompts)
    return [
        {"metric": f"win_rate_{label}", "value": report.win_rate},
        {"metric": f"wins_{label}", "value": report.wins},
        {"metric": f"losses_{label}", "value": report.losses},
        {"metric": f"ties_{label}", "value": report.ties},
    ]


def _summary_rows(per_prompt: pd.DataFrame, prefix: str = "") -> List[Dict[str, Any]]:
    rows = []
    for column in ("kl_sft", "kl_trained", "tv_sft", "tv_trained", "out_mass_sft", "out_mass_trained"):
        rows.append({"metric": f"{prefix}mean_{column}", "value": float(per_prompt[column].mean())})
    return rows


def run_rng_experiment(
    dataset_path: Union[str, Path],
    cfg: RngExperimentConfig,
    test_path: Optional[Union[str, Path]] = None,
) -> ExperimentReport:
    """
    SFT toward the bias token, then preference-train cfg.method against the SFT snapshot.

    Args:
        dataset_path: JSONL training records
        cfg: run settings
        test_path: optional JSONL of held-out prompts; scored only by linear policies

    Returns:
        ExperimentReport whose rows are metric/value pairs
    """
    method = cfg.method
    records = _load_records(dataset_path, cfg.k)
    prompts = unique_prompts(records)
    logger.info(f"RNG experiment: method={method}, records={len(records)}, k={_group_size(records)}, seed={cfg.seed}")

    sft = _sft_snapshot(prompts, cfg, cfg.seed)
    history = _preference_train(sft, records, cfg)
    trained = history.final_snapshot

    per_prompt = compare_to_sft(sft, trained, prompts)
    rows = _win_rows("vs_sft", trained, sft, prompts)
    full = entropy_win_rate(trained, sft, prompts, support="full")
    rows.append({"metric": "win_rate_vs_sft_full", "value": full.win_rate})
    rows.extend(_summary_rows(per_prompt))
    rows.append({"metric": "final_loss", "value": history.losses[-1]})
    rows.append({"metric": "batch_size", "value": cfg.batch_size})

    if cfg.baseline and method in MULTI_SAMPLE_METHODS:
        if _group_size(records) > 1:
            single_method = method[1:]
            single = [r.truncate(1) for r in records]
            baseline = _preference_train(sft, single, cfg, method=single_method).final_snapshot
            rows.extend(_win_rows(f"vs_{single_method}", trained, baseline, prompts))
        else:
            logger.info("k=1 records: single-sample baseline equals the trained policy; skipped")

    if test_path is not None:
        test_prompts = unique_prompts(read_jsonl(test_path))
        if cfg.policy_kind == "linear":
            rows.extend(_win_rows("vs_sft_test", trained, sft, test_prompts))
            rows.extend(_summary_rows(compare_to_sft(sft, trained, test_prompts), prefix="test_"))
        else:
            logger.warning("Tabular policies cannot score unseen prompts; test split skipped")

    prefix = cfg.out_dir / f"rng_{method}_seed{cfg.seed}"
    outputs = {
        "summary": write_csv(summary_frame(rows), Path(f"{prefix}_summary.csv")),
        "per_prompt": write_csv(per_prompt, Path(f"{prefix}_per_prompt.csv")),
        "history": write_csv(history.to_frame(), Path(f"{prefix}_history.csv")),
        "policy": trained.save(Path(f"{prefix}_policy.json")),
        "sft_policy": sft.save(Path(f"{prefix}_sft_policy.json")),
        "config": write_config(cfg, Path(f"{prefix}_config.json")),
    }
    return ExperimentReport(f"rng_{method}", config_echo(cfg), rows, outputs)


def _previous_policy_records(
    prompts: Sequence[IntervalPrompt], previous: PolicySnapshot, k: int, rng: np.random.Generator
) -> List[PreferenceRecord]:
    """Uniform chosen groups against groups sampled from the previous round's policy."""
    records = []
    for prompt in prompts:
        chosen = SampleGroup.from_tokens(rng.integers(prompt.lo, prompt.hi + 1, size=k))
        records.append(PreferenceRecord(prompt, chosen, previous.sample(prompt, rng, k)))
    return records


def run_iterative_experiment(
    dataset_path: Union[str, Path], rounds: int, cfg: RngExperimentConfig
) -> ExperimentReport:
    """
    Round 1 is run_rng_experiment's pipeline; each later round trains against the
    previous round's policy, which also supplies the rejected groups.
    """
    if rounds < 2:
        raise ValueError(f"rounds must be at least 2, got {rounds}")
    records = _load_records(dataset_path, cfg.k)
    prompts = unique_prompts(records)
    k = _group_size(records)
    sft = _sft_snapshot(prompts, cfg, cfg.seed)

    previous = sft
    rows, histories = [], []
    for round_index in range(1, rounds + 1):
        if round_index == 1:
            history = _preference_train(sft, records, cfg)
        else:
            rng = np.random.default_rng([cfg.seed, round_index])
            round_records = _previous_policy_records(prompts, previous, k, rng)
            history = train(previous.thaw(), previous, round_records, cfg.train_config())
        current = history.final_snapshot
        row = {
            "round": round_index,
            "mean_kl": mean_kl(current, prompts),
            "win_rate_vs_sft": entropy_win_rate(current, sft, prompts).win_rate,
            "win_rate_vs_previous": entropy_win_rate(current, previous, prompts).win_rate,
            "final_loss": history.losses[-1],
        }
        logger.info(f"Round {round_index}/{rounds}: mean KL {row['mean_kl']:.4f}")
        rows.append(row)
        frame = history.to_frame()
        frame.insert(0, "round", round_index)
        histories.append(frame)
        previous = current

    prefix = cfg.out_dir / f"iterative_{cfg.method}_seed{cfg.seed}"
    echo = config_echo(cfg)
    echo["rounds"] = rounds
    echo["rejected_side"] = "previous round policy"
    outputs = {
        "rounds": write_csv(pd.DataFrame(rows), Path(f"{prefix}_rounds.csv")),
        "history": write_csv(pd.concat(histories, ignore_index=True), Path(f"{prefix}_history.csv")),
        "policy": previous.save(Path(f"{prefix}_policy.json")),
        "config": write_config(echo, Path(f"{prefix}_config.json")),
    }
    return ExperimentReport(f"iterative_{cfg.method}", echo, rows, outputs)


def run_group_size_ablation(
    ks: Sequence[int], dataset_cfg: RngDatasetConfig, cfg: RngExperimentConfig
) -> ExperimentReport:
    """RNG pipeline for each group size on the same prompts and SFT snapshot."""
    if not ks or min(ks) < 1:
        raise ValueError(f"every group size must be positive, got {list(ks)}")
    prompts = sample_interval_prompts(dataset_cfg, np.random.default_rng(dataset_cfg.seed))
    sft = _sft_snapshot(prompts, cfg, cfg.seed)
    rows = []
    for k in ks:
        records = build_rng_dataset(dataclasses.replace(dataset_cfg, k=k))
        trained = _preference_train(sft, records, cfg).final_snapshot
        rows.append({
            "k": k,
            "win_rate_vs_sft": entropy_win_rate(trained, sft, prompts).win_rate,
            "mean_kl_sft": mean_kl(sft, prompts),
            "mean_kl_trained": mean_kl(trained, prompts),
        })
        logger.info(f"Ablation k={k}: mean KL {rows[-1]['mean_kl_trained']:.4f}")
    echo = {"ks": list(ks), "dataset": config_echo(dataset_cfg), "training": config_echo(cfg)}
    prefix = cfg.out_dir / f"ablation_{cfg.method}_seed{cfg.seed}"
    outputs = {
        "table": write_csv(pd.DataFrame(rows), Path(f"{prefix}.csv")),
        "config": write_config(echo, Path(f"{prefix}_config.json")),
    }
    return ExperimentReport(f"ablation_{cfg.method}", echo, rows, outputs)


@dataclass
class NoiseExperimentConfig:
    """
    Group-labeled versus single-labeled training on the same response pool.

    training.method names the multi-sample method; its single-sample
    counterpart is trained on the first response of each group. The NLL
    anchor stays off (nll_coeff 0.0) unless training sets it.
    """
    training: RngExperimentConfig = field(default_factory=lambda: RngExperimentConfig(nll_coeff=0.0))
    k: int = 5
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    records: int = 500
    a_range: Tuple[int, int] = (0, 1000)
    gap_range: Tuple[int, int] = (5, 10)
    judge_noise: float = 0.05
    noise_free: bool = False
    out_dir: Path = config.OUTPUT_DIR

    def __post_init__(self):
        if isinstance(self.training, dict):
            self.training = RngExperimentConfig.from_dict({"nll_coeff": 0.0, **self.training})
        if self.training.method not in MULTI_SAMPLE_METHODS:
            raise ValueError(f"noise study needs a multi-sample method, got {self.training.method}")
        if self.k < 2:
            raise ValueError(f"noise study needs k >= 2, got {self.k}")
        if not self.seeds:
            raise ValueError("noise study needs at least one seed")
        if self.judge_noise < 0:
            raise ValueError(f"judge_noise must be non-negative, got {self.judge_noise}")
        self.out_dir = Path(self.out_dir)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'NoiseExperimentConfig':
        return config_from_dict(cls, data)


def response_quality(tokens: np.ndarray, prompt: IntervalPrompt, sft_restricted: np.ndarray) -> np.ndarray:
    """1 - SFT interval probability for in-interval tokens, 0 outside."""
    tokens = np.asarray(tokens)
    inside = (tokens >= prompt.lo) & (tokens <= prompt.hi)
    offsets = np.clip(tokens - prompt.lo, 0, prompt.size - 1)
    return np.where(inside, 1.0 - sft_restricted[offsets], 0.0)


def _expected_quality(sft: PolicySnapshot, prompt: IntervalPrompt) -> Tuple[float, float]:
    """Mean quality of a uniform draw and of an SFT draw."""
    restricted = sft.restricted_distribution(prompt)
    full = sft.predictive_distribution(prompt)[prompt.lo:prompt.hi + 1]
    strong = float(np.mean(1.0 - restricted))
    weak = float(np.dot(full, 1.0 - restricted))
    return strong, weak


def _labeled_record(prompt: IntervalPrompt, strong: np.ndarray, weak: np.ndarray, strong_wins: bool) -> PreferenceRecord:
    strong_group = SampleGroup.from_tokens(strong)
    weak_group = SampleGroup.from_tokens(weak)
    if strong_wins:
        return PreferenceRecord(prompt, strong_group, weak_group)
    return PreferenceRecord(prompt, weak_group, strong_group)


def label_noise_pool(
    prompts: Sequence[IntervalPrompt], sft: PolicySnapshot, cfg: NoiseExperimentConfig, seed: int
) -> Tuple[List[PreferenceRecord], List[PreferenceRecord], float, float]:
    """
    Single-labeled and group-labeled records over one response pool.

    Returns:
        (single records, group records, single label accuracy, group label accuracy)
    """
    rng = np.random.default_rng([seed, 1])
    k = cfg.k
    single, group = [], []
    correct_single = correct_group = 0
    for prompt in prompts:
        restricted = sft.restricted_distribution(prompt)
        strong = rng.integers(prompt.lo, prompt.hi + 1, size=k)
        weak = np.array([r.tokens[0] for r in sft.sample(prompt, rng, k).responses])
        q_strong = response_quality(strong, prompt, restricted) + rng.uniform(-cfg.judge_noise, cfg.judge_noise, k)
        q_weak = response_quality(weak, prompt, restricted) + rng.uniform(-cfg.judge_noise, cfg.judge_noise, k)
        if cfg.noise_free:
            expected_strong, expected_weak = _expected_quality(sft, prompt)
            label_single = label_group = expected_strong > expected_weak
        else:
            label_single = label_by_group_sum(q_strong[:1], q_weak[:1])
            label_group = label_by_group_sum(q_strong, q_weak)
        correct_single += int(label_single)
        correct_group += int(label_group)
        single.append(_labeled_record(prompt, strong[:1], weak[:1], label_single))
        group.append(_labeled_record(prompt, strong, weak, label_group))
    return single, group, correct_single / len(prompts), correct_group / len(prompts)


def sign_test_p_value(better: int, worse: int) -> float:
    """One-sided sign test that the group method wins more than half the untied seeds."""
    trials = better + worse
    if trials == 0:
        return 1.0
    return float(binomtest(better, trials, p=0.5, alternative="greater").pvalue)


def run_noise_robustness_experiment(cfg: NoiseExperimentConfig) -> ExperimentReport:
    """
    Train the single-sample method on first-response labels and the multi-sample
    method on group labels from the same pool, per seed.
    """
    method = cfg.training.method
    single_method = method[1:]
    per_seed = []
    for seed in cfg.seeds:
        dataset_cfg = RngDatasetConfig(
            a_range=cfg.a_range, gap_range=cfg.gap_range, records=cfg.records, k=cfg.k,
            seed=seed, vocab_size=cfg.training.vocab_size,
        )
        prompts = sample_interval_prompts(dataset_cfg, np.random.default_rng(seed))
        sft = _sft_snapshot(prompts, cfg.training, seed)
        single, group, acc_single, acc_group = label_noise_pool(prompts, sft, cfg, seed)
        single_policy = _preference_train(sft, single, cfg.training, method=single_method, seed=seed).final_snapshot
        group_policy = _preference_train(sft, group, cfg.training, method=method, seed=seed).final_snapshot
        row = {
            "seed": seed,
            "label_accuracy_single": acc_single,
            "label_accuracy_group": acc_group,
            "kl_sft": mean_kl(sft, prompts),
            f"kl_{single_method}": mean_kl(single_policy, prompts),
            f"kl_{method}": mean_kl(group_policy, prompts),
            f"win_rate_{method}_vs_{single_method}": entropy_win_rate(group_policy, single_policy, prompts).win_rate,
        }
        logger.info(
            f"Noise study seed {seed}: label accuracy {acc_single:.3f} -> {acc_group:.3f}, "
            f"KL {row[f'kl_{single_method}']:.4f} ({single_method}) vs {row[f'kl_{method}']:.4f} ({method})"
        )
        per_seed.append(row)

    table = pd.DataFrame(per_seed)
    group_kl, single_kl = table[f"kl_{method}"], table[f"kl_{single_method}"]
    better = int((group_kl < single_kl).sum())
    worse = int((group_kl > single_kl).sum())
    rows = [{"metric": column, "value": float(table[column].mean())}
            for column in table.columns if column != "seed"]
    rows.extend([
        {"metric": "seeds_group_better", "value": better},
        {"metric": "seeds_group_worse", "value": worse},
        {"metric": "sign_test_p", "value": sign_test_p_value(better, worse)},
    ])

    variant = "clean" if cfg.noise_free else "noisy"
    echo = config_echo(cfg)
    echo["quality_rule"] = QUALITY_RULE
    prefix = cfg.out_dir / f"noise_{method}_{variant}"
    outputs = {
        "seeds": write_csv(table, Path(f"{prefix}_seeds.csv")),
        "summary": write_csv(summary_frame(rows), Path(f"{prefix}_summary.csv")),
        "config": write_config(echo, Path(f"{prefix}_config.json")),
    }
    return ExperimentReport(f"noise_{method}_{variant}", echo, rows, outputs)
