"""Batch harness: naive-network condition grid and extensive training."""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import Tensor
from .model import ModelParams, encode_batch, init, predict_batch
from .optim import TrainConfig, TrainState, train_step
from .solver import SolveConfig, SolveResult, argmin_first, solve_naive
from .testgen import FEATURES, FeatureName, RpmTest, SeqSpec, generate_test

log = logging.getLogger(__name__)

GRID_RULES = (FeatureName.COLOR, FeatureName.SIZE)


@dataclass(frozen=True)
class Condition:
    rule_feature: FeatureName
    distractors: frozenset[FeatureName] = frozenset()
    t: int = 5
    n: int = 4

    def __post_init__(self):
        object.__setattr__(self, "rule_feature", FeatureName(self.rule_feature))
        object.__setattr__(self, "distractors", frozenset(FeatureName(d) for d in self.distractors))
        if self.rule_feature in self.distractors:
            raise ValueError(f"{self.rule_feature.value} cannot be its own distractor")

    def spec(self, seed: int | None = None) -> SeqSpec:
        ordered = [f for f in FEATURES if f in self.distractors]
        return SeqSpec.with_distractors(self.rule_feature, ordered, t=self.t, n=self.n, seed=seed)

    @property
    def label(self) -> str:
        names = "+".join(f.value for f in FEATURES if f in self.distractors) or "none"
        return f"rule={self.rule_feature.value} distractors={names}"


@dataclass(frozen=True)
class SolveRecord:
    index: int
    seed: int
    correct_index: int
    choice: int | None
    correct: bool
    failed: bool
    first_separation_step: int | None


@dataclass
class ConditionResult:
    condition: Condition
    num_tests: int
    successes: int
    records: list[SolveRecord] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return self.successes / self.num_tests

    @property
    def sem(self) -> float:
        p = self.success_rate
        return math.sqrt(p * (1.0 - p) / self.num_tests)

    @property
    def failures(self) -> int:
        return sum(r.failed for r in self.records)


def binomial_sem(successes: int, n: int) -> float:
    p = successes / n
    return math.sqrt(p * (1.0 - p) / n)


def _solve_one(args) -> SolveRecord:
    cond, index, seed, solve_cfg = args
    test = generate_test(cond.spec(seed))
    res = solve_naive(test, SolveConfig(solve_cfg.steps, solve_cfg.record_traces, seed, solve_cfg.train))
    return SolveRecord(index, seed, test.correct, res.choice, bool(res.correct), res.failed, res.first_separation_step)


def _map(fn: Callable, jobs: Sequence, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def run_naive_condition(
    cond: Condition,
    num_tests: int,
    base_seed: int = 0,
    config: SolveConfig = SolveConfig(),
    workers: int = 1,
) -> ConditionResult:
    """Solve ``num_tests`` tests of ``cond``, test i seeded with ``base_seed + i``.

    Each test gets a fresh network initialised from the same seed. Failed
    (diverged) runs count as incorrect.
    """
    if num_tests < 1:
        raise ValueError(f"num_tests must be >= 1, got {num_tests}")
    jobs = [(cond, i, base_seed + i, config) for i in range(num_tests)]
    records = sorted(_map(_solve_one, jobs, workers), key=lambda r: r.index)
    successes = sum(r.correct for r in records)
    log.info("%s: %d/%d", cond.label, successes, num_tests)
    return ConditionResult(cond, num_tests, successes, records)


def condition_matrix(rule: FeatureName, t: int = 5, n: int = 4) -> list[Condition]:
    """All 16 distractor subsets of the four non-rule features."""
    rule = FeatureName(rule)
    if rule not in GRID_RULES:
        raise ValueError(f"condition grid is defined for color and size rules, got {rule.value}")
    others = [f for f in FEATURES if f is not rule]
    conds = []
    for k in range(len(others) + 1):
        for subset in itertools.combinations(others, k):
            conds.append(Condition(rule, frozenset(subset), t, n))
    return conds


def mean_by_distractor_count(results: Iterable[ConditionResult]) -> dict[int, float]:
    """Unweighted mean success rate over conditions sharing a distractor count."""
    groups: dict[int, list[float]] = {}
    for r in results:
        groups.setdefault(len(r.condition.distractors), []).append(r.success_rate)
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


# ---------------------------------------------------------------------------
# extensive training
# ---------------------------------------------------------------------------


@dataclass
class LearningCurve:
    rule: FeatureName
    points: list[tuple[int, float]] = field(default_factory=list)
    init_seed: int = 0
    train_seed: int = 0
    eval_seed: int = 0
    steps_per_sequence: int = 2

    def add(self, sequences: int, accuracy: float) -> None:
        if self.points and sequences <= self.points[-1][0]:
            raise ValueError("sequences_trained must be strictly increasing")
        self.points.append((sequences, accuracy))

    @property
    def initial_accuracy(self) -> float:
        return self.points[0][1]

    @property
    def final_accuracy(self) -> float:
        return self.points[-1][1]


def evaluate(params: ModelParams, tests: Sequence[RpmTest], batch: int = 64) -> float:
    """Decision accuracy of a frozen model; never touches the parameters."""
    if not tests:
        raise ValueError("empty evaluation set")
    images = np.concatenate([np.concatenate([t.tile_canvases[-1:], t.option_canvases]) for t in tests])
    codes = np.concatenate([encode_batch(params, images[i : i + batch]).data for i in range(0, len(images), batch)])
    n = len(tests[0].options)
    codes = codes.reshape(len(tests), 1 + n)
    preds = predict_batch(params, Tensor(np.ascontiguousarray(codes[:, 0]))).data.astype(np.float64)
    errors = (preds[:, None] - codes[:, 1:].astype(np.float64)) ** 2
    hits = sum(argmin_first(e) == t.correct for e, t in zip(errors, tests))
    return hits / len(tests)


def difficult_tests(rule: FeatureName, count: int, seed: int, t: int = 5, n: int = 4) -> list[RpmTest]:
    """Tests with every non-rule feature as a distractor, seeded ``seed + i``."""
    cond = Condition(rule, frozenset(f for f in FEATURES if f is not FeatureName(rule)), t, n)
    return [generate_test(cond.spec(seed + i)) for i in range(count)]


def run_extensive(
    rule: FeatureName,
    num_train_sequences: int = 2000,
    steps_per_sequence: int = 2,
    eval_every: int = 250,
    test_set_size: int = 50,
    seed: int = 0,
    train: TrainConfig = TrainConfig(),
    t: int = 5,
    n: int = 4,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[LearningCurve, ModelParams]:
    """Train one persistent model on a stream of easy sequences.

    The model is initialised from ``seed``; training sequence i uses seed
    ``seed + 1_000_000 + i`` and evaluation test j uses ``seed + 2_000_000 + j``.
    Accuracy on the frozen difficult set is recorded at 0 sequences, every
    ``eval_every`` sequences, and after the last one.
    """
    rule = FeatureName(rule)
    if steps_per_sequence < 1:
        raise ValueError(f"steps_per_sequence must be >= 1, got {steps_per_sequence}")
    if eval_every < 1:
        raise ValueError(f"eval_every must be >= 1, got {eval_every}")
    train_seed, eval_seed = seed + 1_000_000, seed + 2_000_000
    eval_set = difficult_tests(rule, test_set_size, eval_seed, t, n)
    params = init(seed)
    state = TrainState.create(train)
    curve = LearningCurve(rule, init_seed=seed, train_seed=train_seed, eval_seed=eval_seed, steps_per_sequence=steps_per_sequence)

    def record(k: int) -> None:
        acc = evaluate(params, eval_set)
        curve.add(k, acc)
        log.info("extensive %s: %d sequences, accuracy %.3f", rule.value, k, acc)
        if progress is not None:
            progress(k, acc)

    record(0)
    for i in range(num_train_sequences):
        tiles = generate_test(SeqSpec.easy(rule, t=t, n=n, seed=train_seed + i)).tile_canvases
        for _ in range(steps_per_sequence):
            train_step(params, state, tiles)
        done = i + 1
        if done % eval_every == 0 or done == num_train_sequences:
            record(done)
    return curve, params
