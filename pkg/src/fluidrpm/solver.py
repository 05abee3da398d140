"""Solve a single test with a freshly initialised network trained on the test itself."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams, encode_batch, init, predict
from .optim import (
    LossValues,
    TrainConfig,
    TrainingDiverged,
    TrainState,
    apply_updates,
    compute_gradients,
)
from .testgen import RpmTest

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolveConfig:
    steps: int = 200
    record_traces: bool = True
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")


@dataclass
class SolveResult:
    choice: int | None
    correct: bool | None
    errors: np.ndarray  # (recorded points, n); row s = errors after s updates
    losses: list[LossValues]
    first_separation_step: int | None
    failed: bool = False
    diagnostic: str = ""

    @property
    def final_errors(self) -> np.ndarray:
        return self.errors[-1]


def prediction_errors(params: ModelParams, last_tile, options, last_prediction: float | None = None) -> np.ndarray:
    """(T(Z(last_tile)) - Z(option_k))^2 for every option."""
    options = np.asarray(options)
    if last_prediction is None:
        batch = np.concatenate([np.asarray(last_tile)[None], options])
        codes = encode_batch(params, batch).data.astype(np.float64)
        last_prediction = predict(params, float(codes[0]))
        option_codes = codes[1:]
    else:
        option_codes = encode_batch(params, options).data.astype(np.float64)
    return (last_prediction - option_codes) ** 2


def argmin_first(errors) -> int:
    """Index of the smallest error; ties go to the lowest index."""
    errors = np.asarray(errors)
    if errors.size == 0:
        raise ValueError("no options to choose from")
    return int(np.argmin(errors))


def decide(params: ModelParams, last_tile, options) -> int:
    return argmin_first(prediction_errors(params, last_tile, options))


def first_separation_step(errors: np.ndarray, correct: int) -> int | None:
    """Earliest row after which the correct option's error stays strictly smallest."""
    errors = np.asarray(errors)
    others = np.delete(errors, correct, axis=1)
    ahead = errors[:, correct] < others.min(axis=1)
    if not ahead[-1]:
        return None
    # last row where it was not strictly ahead, plus one
    behind = np.flatnonzero(~ahead)
    return int(behind[-1] + 1) if behind.size else 0


def solve_naive(test: RpmTest, config: SolveConfig = SolveConfig(), params: ModelParams | None = None) -> SolveResult:
    """Train on ``test.tiles`` for ``config.steps`` steps, then pick an option.

    A non-finite loss aborts training and yields a failed result (choice None,
    counted as incorrect by the experiment harness).
    """
    params = init(config.seed) if params is None else params
    state = TrainState.create(config.train)
    tiles = test.tile_canvases
    options = test.option_canvases
    trace: list[np.ndarray] = []
    losses: list[LossValues] = []
    try:
        for _ in range(config.steps):
            grads = compute_gradients(params, tiles, state.sigma)
            if config.record_traces:
                # same parameters as the forward that produced last_prediction
                trace.append(prediction_errors(params, tiles[-1], options, grads.last_prediction))
            apply_updates(params, state, grads)
            losses.append(grads.losses)
        final = prediction_errors(params, tiles[-1], options)
        if not np.all(np.isfinite(final)):
            raise TrainingDiverged("non-finite prediction error after training")
    except TrainingDiverged as exc:
        log.warning("solve diverged after %d steps: %s", len(losses), exc)
        return SolveResult(
            None,
            False if test.correct is not None else None,
            np.array(trace).reshape(-1, len(options)),
            losses,
            None,
            failed=True,
            diagnostic=str(exc),
        )
    trace.append(final)
    errors = np.array(trace)
    choice = argmin_first(final)
    correct = None if test.correct is None else choice == test.correct
    sep = None
    if test.correct is not None and config.record_traces:
        sep = first_separation_step(errors, test.correct)
    return SolveResult(choice, correct, errors, losses, sep)


def write_traces(path: str | Path, result: SolveResult) -> None:
    """CSV: step, loss columns (blank at step 0), one error column per option."""
    n = result.errors.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss_pred", "loss_dis", "loss_bound", *(f"err_{k}" for k in range(n))])
        for s, row in enumerate(result.errors):
            # losses[s - 1] is the loss measured during update s
            lv = result.losses[s - 1].as_tuple() if 0 < s <= len(result.losses) else ("", "", "")
            w.writerow([s, *(v if v == "" else f"{v:.6g}" for v in lv), *(f"{e:.6g}" for e in row)])
