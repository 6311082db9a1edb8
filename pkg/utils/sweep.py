"""
Early-Exit Engine - Threshold & Pruning Sweeps

Evaluates a grid of configurations on held-out text:
- early exit: every (threshold, missing-state policy) pair
- layer pruning: every p from 0 (full model) to n_blocks - 2

Each configuration gets teacher-forced accuracy and perplexity on fixed
windows, a reduction factor from the merged ledgers, and a degenerate-output
rate from free greedy generations.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from config.run_config import RunConfig
from config.settings import DEGENERATE_RUN_LENGTH
from models.engine import EarlyExitEngine, degenerate_check
from models.exits import ExitPolicy
from models.ledger import reduction_factor
from models.records import GenerationRequest, Mode, PruneSpec, SequenceScore, SweepRecord
from models.training import fixed_windows

logger = logging.getLogger(__name__)


class SweepPoint(NamedTuple):
    config_id: str
    mode: Mode
    policy: str
    theta: Optional[float] = None
    prune_p: Optional[int] = None


def _theta_label(theta: float) -> str:
    return "never" if theta > 1.0 else f"{theta:.3f}"


def early_exit_points(config: RunConfig) -> List[SweepPoint]:
    points = []
    for policy in config.active_policies():
        for theta in config.thetas:
            mode = ExitPolicy(threshold=theta, variant=config.exit_variant, state_policy=policy)
            config_id = f"{config.backbone}-{config.exit_variant}-{policy}-t{_theta_label(theta)}"
            points.append(SweepPoint(config_id, mode, policy, theta=mode.threshold))
    return points


def prune_points(config: RunConfig) -> List[SweepPoint]:
    return [
        SweepPoint(f"{config.backbone}-prune-p{p}", PruneSpec(p=p), "prune", prune_p=p)
        for p in range(config.n_blocks - 1)
    ]


class SweepData(NamedTuple):
    windows: np.ndarray
    prompts: List[List[int]]


def sweep_data(holdout: Sequence[int], config: RunConfig) -> SweepData:
    """Scoring windows and generation prompts, fixed across configurations."""
    windows = fixed_windows(holdout, config.eval_windows, config.eval_length - 1)
    prompt_windows = fixed_windows(holdout, config.gen_prompts, config.prompt_len - 1)
    return SweepData(windows, [list(map(int, w)) for w in prompt_windows])


def evaluate_point(engine: EarlyExitEngine, point: SweepPoint, data: SweepData,
                   config: RunConfig) -> SweepRecord:
    """Score, generate and account one configuration."""
    total = SequenceScore()
    for window in data.windows:
        total = total.merge(engine.score(list(map(int, window)), config.prompt_len, point.mode))

    penalty = config.penalty_for(point.policy if point.prune_p is None else None)
    degenerate = 0
    for prompt in data.prompts:
        result = engine.generate(GenerationRequest(
            prompt_ids=prompt,
            max_new_tokens=config.gen_tokens,
            mode=point.mode,
            repetition_penalty=penalty,
        ))
        degenerate += int(degenerate_check(result.tokens, DEGENERATE_RUN_LENGTH))

    ledger = total.ledger
    record = SweepRecord(
        config_id=point.config_id,
        backbone=config.backbone,
        exit_variant=config.exit_variant if point.prune_p is None else "",
        policy=point.policy,
        theta=point.theta,
        prune_p=point.prune_p,
        accuracy=total.correct / total.count,
        perplexity=math.exp(total.nll / total.count),
        reduction_factor=reduction_factor(ledger, include_prefill=config.include_prefill),
        ops_backbone=ledger.ops_backbone,
        ops_classifiers=ledger.ops_classifiers,
        ops_recompute=ledger.ops_recompute,
        ops_reference=ledger.ops_reference,
        tokens=ledger.tokens,
        mean_exit_depth=float(np.mean(total.exit_depths)),
        degenerate_fraction=degenerate / len(data.prompts),
    )
    logger.info(f"{record.config_id}: acc {record.accuracy:.4f}, ppl {record.perplexity:.3f}, "
                f"RF {record.reduction_factor:.3f}, depth {record.mean_exit_depth:.2f}, "
                f"degenerate {record.degenerate_fraction:.2f}")
    return record


def run_sweep(engine: EarlyExitEngine, points: Sequence[SweepPoint], holdout: Sequence[int],
              config: RunConfig) -> List[SweepRecord]:
    data = sweep_data(holdout, config)
    logger.info(f"Sweeping {len(points)} configurations over {len(data.windows)} windows "
                f"and {len(data.prompts)} prompts")
    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            return list(pool.map(lambda p: evaluate_point(engine, p, data, config), points))
    return [evaluate_point(engine, p, data, config) for p in points]


def check_monotonicity(records: Sequence[SweepRecord]) -> List[str]:
    """
    Within each early-exit series, a higher threshold should not lower the
    mean exit depth nor raise the reduction factor. Returns one message per
    violation.
    """
    problems = []
    series = {}
    for record in records:
        if record.theta is not None:
            series.setdefault(record.policy, []).append(record)
    for policy, group in sorted(series.items()):
        group = sorted(group, key=lambda r: r.theta)
        for lower, higher in zip(group, group[1:]):
            if higher.mean_exit_depth < lower.mean_exit_depth:
                problems.append(f"{policy}: depth falls from {lower.config_id} to {higher.config_id}")
            if higher.reduction_factor > lower.reduction_factor:
                problems.append(f"{policy}: reduction factor rises from {lower.config_id} "
                                f"to {higher.config_id}")
    return problems


def best_within_quality(records: Sequence[SweepRecord], baseline_accuracy: float,
                        tolerance: float = 0.95) -> Optional[SweepRecord]:
    """Valid early-exit record with the largest reduction factor keeping tolerance x baseline accuracy."""
    eligible = [
        r for r in records
        if r.theta is not None and r.valid and r.accuracy >= tolerance * baseline_accuracy
    ]
    return max(eligible, key=lambda r: r.reduction_factor, default=None)
