"""Stepping-stone composition and the full block-wise distillation objective.

Stepping stone i runs the student's first i blocks, adapts the feature with
connector i, and finishes with the frozen teacher's remaining blocks and
classifier. During training the stones reuse the student features already
computed for the main forward pass, so each teacher tail runs once per batch.

The total objective combines the student's task/distill terms, per-stone
task/distill terms scaled by dyadic coefficients 2^(i-n), and a cross term
that distills the student and every stone toward the (detached) ensemble of
stone logits. A linear warmup factor ramps the distill and cross weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, UsageError
from .losses import LogitDistance, kl_kd, task_loss, DEFAULT_TAU
from .nn import CompositeNet, Connector
from .tensor import Tensor


@dataclass
class DistillPlan:
    """Loss weights, temperature, active stone subset, and warmup schedule."""

    n: int
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    tau: float = DEFAULT_TAU
    active_stones: tuple[int, ...] = ()
    warmup_epochs: int = 0
    coeff_in_cross: bool = True
    include_stone_task: bool = True
    include_stone_distill: bool = True
    distance: Optional[LogitDistance] = None

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"need at least one block, got n={self.n}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup epochs must be >= 0, got {self.warmup_epochs}")
        stones = tuple(sorted(set(int(i) for i in self.active_stones)))
        if any(i < 1 or i > self.n for i in stones):
            raise ConfigError(
                f"active stones {stones} not a subset of 1..{self.n}")
        self.active_stones = stones

    def coefficient(self, i: int) -> float:
        """Dyadic stone weight 2^(i-n); exactly representable."""
        return 2.0 ** (i - self.n)

    @property
    def stone_coefficients(self) -> dict[int, float]:
        return {i: self.coefficient(i) for i in self.active_stones}

    def effective_gamma(self) -> float:
        return 0.0 if not self.active_stones else self.gamma

    def make_distance(self) -> LogitDistance:
        return self.distance if self.distance is not None else kl_kd(self.tau)


def prune_stones(plan: DistillPlan, keep) -> DistillPlan:
    """New plan restricted to the kept stone subset; coefficients unchanged."""
    keep = tuple(sorted(set(int(i) for i in keep)))
    if any(i < 1 or i > plan.n for i in keep):
        raise ConfigError(f"kept stones {keep} not a subset of 1..{plan.n}")
    return replace(plan, active_stones=keep)


def warmup_factor(epoch: int, warmup_epochs: int) -> float:
    """Linear ramp: 0 at epoch 0, 1 from warmup_epochs on (1 when disabled)."""
    if warmup_epochs < 0:
        raise ConfigError(f"warmup epochs must be >= 0, got {warmup_epochs}")
    if warmup_epochs == 0:
        return 1.0
    return min(1.0, epoch / warmup_epochs)


@dataclass
class DistillBundle:
    """The nets of one distillation run; teacher is optional for scratch runs."""

    student: CompositeNet
    teacher: Optional[CompositeNet]
    connectors: list[Connector] = field(default_factory=list)

    def connector(self, i: int) -> Connector:
        if not 1 <= i <= len(self.connectors):
            raise UsageError(f"no connector with index {i}")
        return self.connectors[i - 1]


class SteppingStone:
    """Hybrid net: student blocks 1..i, connector i, teacher blocks i+1..n + head."""

    def __init__(self, index: int, student: CompositeNet, connector: Connector,
                 teacher: CompositeNet):
        if not 1 <= index <= teacher.n:
            raise ConfigError(f"stone index {index} outside 1..{teacher.n}")
        self.index = index
        self.student = student
        self.connector = connector
        self.teacher = teacher

    def logits_from_feature(self, feature: Tensor, training: bool = True) -> Tensor:
        """Teacher tail over the adapted feature; the frozen tail runs in eval mode."""
        adapted = self.connector.forward(feature, training)
        return self.teacher.forward_tail(adapted, self.index, training=False)

    def forward_full(self, x: Tensor, training: bool = True) -> Tensor:
        """Recompute the student head too (oracle path; training reuses features)."""
        f = x
        for block in self.student.blocks[:self.index]:
            f = block.forward(f, training)
        return self.logits_from_feature(f, training)


def build_stones(bundle: DistillBundle, plan: DistillPlan) -> dict[int, SteppingStone]:
    if plan.active_stones and bundle.teacher is None:
        raise ConfigError("stepping stones need a teacher")
    return {i: SteppingStone(i, bundle.student, bundle.connector(i), bundle.teacher)
            for i in plan.active_stones}


def stone_logits(bundle: DistillBundle, student_features: list[Tensor],
                 plan: DistillPlan, indices=None, training: bool = True
                 ) -> dict[int, Tensor]:
    """Logits of each requested stone, reusing the student's features."""
    if indices is None:
        indices = plan.active_stones
    indices = tuple(int(i) for i in indices)
    inactive = [i for i in indices if i not in plan.active_stones]
    if inactive:
        raise UsageError(f"stones {inactive} are not active in the plan")
    if len(student_features) != plan.n:
        raise UsageError(
            f"need all {plan.n} student features, got {len(student_features)}")
    stones = build_stones(bundle, plan)
    return {i: stones[i].logits_from_feature(student_features[i - 1], training)
            for i in indices}


def ensemble_logits(stone_map: dict[int, Tensor]) -> Tensor:
    """Arithmetic mean of the active stone logits."""
    if not stone_map:
        raise UsageError("ensemble of an empty stone set is undefined")
    keys = sorted(stone_map)
    acc = stone_map[keys[0]]
    for i in keys[1:]:
        acc = T.add(acc, stone_map[i])
    return T.scale(acc, 1.0 / len(keys))


def _cross_parts(y_s: Tensor, stone_map: dict[int, Tensor], y_ens,
                 distance: LogitDistance, coefficients: Optional[dict[int, float]]
                 ) -> list[tuple[int, float, Tensor]]:
    """(key, coefficient, term) triples; key 0 is the student term."""
    parts = [(0, 1.0, distance(y_s, y_ens))]
    for i in sorted(stone_map):
        coef = coefficients.get(i, 1.0) if coefficients else 1.0
        parts.append((i, coef, distance(stone_map[i], y_ens)))
    return parts


def cross_loss(y_s: Tensor, stone_map: dict[int, Tensor], y_ens,
               distance: LogitDistance,
               coefficients: Optional[dict[int, float]] = None) -> Tensor:
    """Distance of student and stones to the (constant) ensemble target."""
    if not stone_map:
        return Tensor(np.asarray(0.0))
    total = None
    for _, coef, term in _cross_parts(y_s, stone_map, y_ens, distance, coefficients):
        term = T.scale(term, coef) if coef != 1.0 else term
        total = term if total is None else T.add(total, term)
    return total


@dataclass
class LossBreakdown:
    """Every objective term of one batch, unweighted and aggregated."""

    task_student: float
    distill_student: float
    cross_student: float
    stone_task: dict[int, float]
    stone_distill: dict[int, float]
    stone_cross: dict[int, float]
    task_total: float
    distill_total: float
    cross_total: float
    warmup: float
    total: float


def total_loss(x: Tensor, targets, bundle: DistillBundle, plan: DistillPlan,
               epoch: int, training: bool = True,
               teacher_logits=None) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum alpha*task + w*beta*distill + w*gamma*cross with stone terms.

    Stone task/distill terms carry the dyadic coefficients; warmup scales the
    distill and cross weights only, never the task weight. With no active
    stones and gamma forced to zero this reduces exactly to vanilla
    alpha*CE + w*beta*d(student, teacher).

    ``teacher_logits`` may carry precomputed frozen-teacher outputs for this
    batch (they are constants of the run), in which case the teacher's own
    forward pass is skipped.
    """
    distance = plan.make_distance()
    student = bundle.student
    teacher = bundle.teacher
    w = warmup_factor(epoch, plan.warmup_epochs)

    y_s, features = student.forward_with_features(x, training)
    l_task = task_loss(y_s, targets)
    bd_task_s = l_task.item()
    bd_stone_task: dict[int, float] = {}
    bd_stone_distill: dict[int, float] = {}
    bd_stone_cross: dict[int, float] = {}

    y_t = None
    if teacher_logits is not None:
        y_t = Tensor(teacher_logits.data if isinstance(teacher_logits, Tensor)
                     else teacher_logits)
    elif teacher is not None and (plan.beta > 0 or plan.effective_gamma() > 0
                                  or plan.active_stones):
        with T.no_grad():
            y_t = teacher.forward(x, training=False)

    stones_y = stone_logits(bundle, features, plan, training=training) \
        if plan.active_stones else {}

    for i in sorted(stones_y):
        if plan.include_stone_task:
            term = task_loss(stones_y[i], targets)
            bd_stone_task[i] = term.item()
            l_task = T.add(l_task, T.scale(term, plan.coefficient(i)))
        else:
            bd_stone_task[i] = 0.0

    if y_t is not None:
        l_distill = distance(y_s, y_t)
        bd_distill_s = l_distill.item()
        for i in sorted(stones_y):
            if plan.include_stone_distill:
                term = distance(stones_y[i], y_t)
                bd_stone_distill[i] = term.item()
                l_distill = T.add(l_distill, T.scale(term, plan.coefficient(i)))
            else:
                bd_stone_distill[i] = 0.0
    else:
        l_distill = Tensor(np.asarray(0.0))
        bd_distill_s = 0.0
        bd_stone_distill = {i: 0.0 for i in stones_y}

    gamma_eff = plan.effective_gamma()
    bd_cross_s = 0.0
    if stones_y and gamma_eff > 0:
        y_ens = ensemble_logits(stones_y).detach()
        coeffs = plan.stone_coefficients if plan.coeff_in_cross else None
        l_cross = None
        for key, coef, term in _cross_parts(y_s, stones_y, y_ens, distance, coeffs):
            if key == 0:
                bd_cross_s = term.item()
            else:
                bd_stone_cross[key] = term.item()
            term = T.scale(term, coef) if coef != 1.0 else term
            l_cross = term if l_cross is None else T.add(l_cross, term)
    else:
        l_cross = Tensor(np.asarray(0.0))
        bd_stone_cross = {i: 0.0 for i in stones_y}

    total = T.add(T.add(T.scale(l_task, plan.alpha),
                        T.scale(l_distill, w * plan.beta)),
                  T.scale(l_cross, w * gamma_eff))

    breakdown = LossBreakdown(
        task_student=bd_task_s,
        distill_student=bd_distill_s,
        cross_student=bd_cross_s,
        stone_task=bd_stone_task,
        stone_distill=bd_stone_distill,
        stone_cross=bd_stone_cross,
        task_total=l_task.item(),
        distill_total=l_distill.item(),
        cross_total=l_cross.item(),
        warmup=w,
        total=total.item(),
    )
    return total, breakdown
