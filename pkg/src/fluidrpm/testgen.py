"""Procedural sequential RPM tests.

A test shows ``t`` tiles and offers ``n`` candidate continuations. Exactly
one feature follows a monotone rule; every other feature is either held
constant across all tiles and options or redrawn independently for each
one (a distractor). Wrong options take a rule value different from the
correct continuation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .raster import MAX_DIAMETER, MIN_DIAMETER, ShapeKind, render_tile

NUM_CELLS = 9


class GenerationError(RuntimeError):
    """A rule step ran past the end of its value set."""


class SpecError(ValueError):
    """Invalid sequence specification."""


class FeatureName(str, enum.Enum):
    COLOR = "color"
    POSITIONS = "positions"
    SIZE = "size"
    SHAPE = "shape"
    NUMBER = "number"


FEATURES: tuple[FeatureName, ...] = tuple(FeatureName)
RULE_FEATURES = frozenset({FeatureName.COLOR, FeatureName.SIZE, FeatureName.NUMBER})


class FeatureRole(str, enum.Enum):
    CONSTANT = "constant"
    DISTRACTOR = "distractor"
    RULE = "rule"


class Permutations:
    """All orderings of ``range(n)``; sampled, never enumerated."""

    def __init__(self, n: int = NUM_CELLS):
        self.n = n

    def __len__(self) -> int:
        return math.factorial(self.n)

    def __contains__(self, value) -> bool:
        return sorted(value) == list(range(self.n))

    def sample(self, rng: np.random.Generator) -> tuple[int, ...]:
        return tuple(int(i) for i in rng.permutation(self.n))

    def __repr__(self) -> str:
        return f"Permutations({self.n})"


def possible_values(feature: FeatureName, t: int):
    """Ordered legal values of ``feature`` for a sequence of length ``t``."""
    feature = FeatureName(feature)
    if t < 2:
        raise SpecError(f"t must be >= 2, got {t}")
    if feature is FeatureName.COLOR:
        return [i / (t + 1) for i in range(1, t + 2)]
    if feature is FeatureName.SIZE:
        return [float(v) for v in np.linspace(MIN_DIAMETER, MAX_DIAMETER, t + 1)]
    if feature is FeatureName.NUMBER:
        return list(range(1, NUM_CELLS + 1))
    if feature is FeatureName.SHAPE:
        return list(ShapeKind)
    return Permutations(NUM_CELLS)


def apply_rule(value_index: int, step: int, num_values: int | None = None) -> int:
    """Advance an index into an ordered value set by ``step`` (may be negative)."""
    out = value_index + step
    if out < 0 or (num_values is not None and out >= num_values):
        raise GenerationError(f"rule step {value_index}{step:+d} leaves the value set of size {num_values}")
    return out


@dataclass(frozen=True)
class SeqSpec:
    roles: Mapping[FeatureName, FeatureRole]
    t: int = 5
    n: int = 4
    seed: int | None = None
    increasing: bool = True

    def __post_init__(self):
        roles = {FeatureName(k): FeatureRole(v) for k, v in dict(self.roles).items()}
        for f in FEATURES:
            roles.setdefault(f, FeatureRole.CONSTANT)
        object.__setattr__(self, "roles", roles)
        self.validate()

    @classmethod
    def easy(cls, rule: FeatureName, **kw) -> "SeqSpec":
        return cls({rule: FeatureRole.RULE}, **kw)

    @classmethod
    def with_distractors(cls, rule: FeatureName, distractors: Sequence[FeatureName], **kw) -> "SeqSpec":
        roles = {FeatureName(d): FeatureRole.DISTRACTOR for d in distractors}
        roles[FeatureName(rule)] = FeatureRole.RULE
        return cls(roles, **kw)

    @property
    def rule(self) -> FeatureName:
        return next(f for f, r in self.roles.items() if r is FeatureRole.RULE)

    @property
    def distractors(self) -> tuple[FeatureName, ...]:
        return tuple(f for f in FEATURES if self.roles[f] is FeatureRole.DISTRACTOR)

    def validate(self) -> None:
        if self.t < 2:
            raise SpecError(f"t must be >= 2, got {self.t}")
        if self.n < 2:
            raise SpecError(f"n must be >= 2, got {self.n}")
        rules = [f for f, r in self.roles.items() if r is FeatureRole.RULE]
        if len(rules) != 1:
            raise SpecError(f"exactly one feature must follow the rule, got {[f.value for f in rules]}")
        rule = rules[0]
        if rule not in RULE_FEATURES:
            raise SpecError(f"{rule.value} cannot carry a monotone rule")
        if rule is FeatureName.NUMBER and self.t + 1 > NUM_CELLS:
            raise SpecError(f"number rule needs t + 1 <= {NUM_CELLS}, got t={self.t}")


@dataclass(frozen=True)
class TileDescriptor:
    color: float
    positions: tuple[int, ...]
    size: float
    shape: ShapeKind
    number: int

    def value(self, feature: FeatureName):
        return getattr(self, FeatureName(feature).value)

    def replace(self, **changes) -> "TileDescriptor":
        return TileDescriptor(**{**self.__dict__, **changes})


@dataclass
class RpmTest:
    tiles: list[TileDescriptor]
    options: list[TileDescriptor]
    correct: int | None
    spec: SeqSpec

    @cached_property
    def tile_canvases(self) -> np.ndarray:
        return np.stack([render_tile(d) for d in self.tiles])

    @cached_property
    def option_canvases(self) -> np.ndarray:
        return np.stack([render_tile(d) for d in self.options])


def _draw(feature: FeatureName, t: int, rng: np.random.Generator):
    values = possible_values(feature, t)
    if isinstance(values, Permutations):
        return values.sample(rng)
    return values[int(rng.integers(len(values)))]


def _rule_start(spec: SeqSpec, num_values: int, rng: np.random.Generator) -> int:
    span = spec.t  # index distance from first tile to the correct option
    free = num_values - 1 - span
    if free < 0:
        raise GenerationError(f"{spec.rule.value} has {num_values} values, cannot take {span} steps")
    offset = int(rng.integers(free + 1)) if free else 0
    return offset if spec.increasing else num_values - 1 - offset


def generate_test(spec: SeqSpec, rng: np.random.Generator | None = None) -> RpmTest:
    """Draw one test; with ``rng=None`` a generator seeded from ``spec.seed`` is used."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    t, n = spec.t, spec.n
    rule = spec.rule
    rule_values = possible_values(rule, t)
    step = 1 if spec.increasing else -1
    start = _rule_start(spec, len(rule_values), rng)

    # initial draw, in fixed feature order, fixes every constant feature
    initial = {f: _draw(f, t, rng) for f in FEATURES if f is not rule}

    def make(rule_value) -> TileDescriptor:
        vals = {}
        for f in FEATURES:
            role = spec.roles[f]
            if role is FeatureRole.RULE:
                vals[f.value] = rule_value
            elif role is FeatureRole.CONSTANT:
                vals[f.value] = initial[f]
            else:
                vals[f.value] = _draw(f, t, rng)
        return TileDescriptor(**vals)

    tiles = []
    for j in range(t):
        idx = apply_rule(start, j * step, len(rule_values))
        tiles.append(make(rule_values[idx]))
    correct_value = rule_values[apply_rule(start, t * step, len(rule_values))]
    correct_option = make(correct_value)

    wrong_pool = [v for v in rule_values if v != correct_value]
    wrong = [make(wrong_pool[int(rng.integers(len(wrong_pool)))]) for _ in range(n - 1)]
    correct = int(rng.integers(n))
    options = wrong[:correct] + [correct_option] + wrong[correct:]
    return RpmTest(tiles, options, correct, spec)


def check_invariants(test: RpmTest) -> list[str]:
    """Return a list of violated test invariants (empty when the test is valid)."""
    problems = []
    spec = test.spec
    rule = spec.rule
    values = possible_values(rule, spec.t)
    seq = [d.value(rule) for d in test.tiles]
    idx = [values.index(v) for v in seq]
    step = 1 if spec.increasing else -1
    if any(b - a != step for a, b in zip(idx, idx[1:])):
        problems.append(f"rule feature {rule.value} does not step by {step}: {seq}")
    if len(test.tiles) != spec.t or len(test.options) != spec.n:
        problems.append("wrong tile/option count")
    if test.correct is not None:
        expected = values[idx[-1] + step] if 0 <= idx[-1] + step < len(values) else None
        if test.options[test.correct].value(rule) != expected:
            problems.append("correct option does not continue the rule")
        for k, opt in enumerate(test.options):
            if k != test.correct and opt.value(rule) == expected:
                problems.append(f"wrong option {k} shares the rule value")
    everything = test.tiles + test.options
    for f in FEATURES:
        if spec.roles[f] is FeatureRole.CONSTANT and len({d.value(f) for d in everything}) != 1:
            problems.append(f"constant feature {f.value} varies")
    for d in everything:
        for f in FEATURES:
            legal = possible_values(f, spec.t)
            if d.value(f) not in legal:
                problems.append(f"{f.value}={d.value(f)!r} is not a legal value")
    return problems
