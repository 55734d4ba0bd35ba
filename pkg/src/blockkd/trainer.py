"""SGD training loop for scratch, vanilla-KD, and block-wise distillation runs.

A run is deterministic given (settings, seed): initialization and batch
order both derive from the seed, and all arithmetic is fixed-order. Timing
is recorded per epoch but kept out of the deterministic metrics.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .core import DistillBundle, DistillPlan, LossBreakdown, total_loss, warmup_factor
from .data import Dataset
from .errors import ConfigError, EvaluationError, TrainingError
from .nn import ArchSpec, CompositeNet, Connector, build_factory_pair
from .tensor import Tensor


@dataclass
class Schedule:
    """Multi-step decay: lr(e) = base * decay^(number of milestones <= e)."""

    base_lr: float
    milestones: tuple[int, ...] = ()
    decay: float = 0.1

    def __post_init__(self):
        self.milestones = tuple(sorted(int(m) for m in self.milestones))
        if self.base_lr <= 0:
            raise ConfigError(f"base lr must be positive, got {self.base_lr}")


def lr_at(schedule: Schedule, epoch: int) -> float:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    drops = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * schedule.decay ** drops


@dataclass
class OptimizerState:
    lr: float
    momentum: float
    weight_decay: float
    velocities: dict[str, np.ndarray] = field(default_factory=dict)


class SGD:
    """Momentum SGD with decoupled-from-nothing classic weight decay:
    v <- momentum*v + (grad + wd*param); param <- param - lr*v.
    """

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float,
                 momentum: float = 0.9, weight_decay: float = 5e-4):
        for name, p in named_params:
            if not p.requires_grad:
                raise ConfigError(f"parameter '{name}' is frozen; refusing to train it")
        self.params = list(named_params)
        self.state = OptimizerState(lr=lr, momentum=momentum,
                                    weight_decay=weight_decay)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        sgd_step(self.params, self.state)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def sgd_step(named_params: list[tuple[str, Tensor]], state: OptimizerState) -> None:
    for name, p in named_params:
        if p.grad is None:
            raise TrainingError(f"parameter '{name}' has no gradient; "
                                "did backward() run on the loss?")
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.velocities[name] = v
        v *= state.momentum
        v += p.grad + state.weight_decay * p.data
        p.data -= state.lr * v


@dataclass
class TrainSettings:
    arch: ArchSpec
    plan: DistillPlan
    epochs: int
    batch_size: int
    schedule: Schedule
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.plan.n != self.arch.n:
            raise ConfigError(
                f"plan covers {self.plan.n} blocks but architecture has {self.arch.n}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("need epochs >= 0 and batch size >= 2")


@dataclass
class EpochRow:
    epoch: int
    lr: float
    breakdown: LossBreakdown
    train_acc: float
    test_acc: float
    ms_per_batch: float


@dataclass
class TrainReport:
    initial_train_acc: float
    initial_test_acc: float
    rows: list[EpochRow]
    student: CompositeNet
    teacher: Optional[CompositeNet]
    connectors: list[Connector]

    @property
    def final_test_acc(self) -> float:
        return self.rows[-1].test_acc if self.rows else self.initial_test_acc

    @property
    def mean_ms_per_batch(self) -> float:
        if not self.rows:
            return 0.0
        return float(np.mean([r.ms_per_batch for r in self.rows]))


def _as_input(net: CompositeNet, batch: np.ndarray) -> Tensor:
    want = net.blocks[0].in_shape
    if batch.ndim == 2 and len(want) == 3 and want[1] == want[2] == 1:
        batch = batch.reshape(batch.shape[0], batch.shape[1], 1, 1)
    return Tensor(batch)


def _check_dataset(arch: ArchSpec, ds: Dataset, tag: str) -> None:
    shape = ds.samples.shape
    want = (arch.in_channels, arch.in_size, arch.in_size)
    flat_ok = len(shape) == 2 and arch.in_size == 1 and shape[1] == arch.in_channels
    grid_ok = len(shape) == 4 and shape[1:] == want
    if not (flat_ok or grid_ok):
        raise ConfigError(
            f"{tag} samples of shape {shape} do not match architecture input {want}")
    if ds.labels.size and int(ds.labels.max()) >= arch.k:
        raise ConfigError(
            f"{tag} labels reach {int(ds.labels.max())} but architecture has "
            f"{arch.k} classes")


def evaluate(net: CompositeNet, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode (batch norm uses running statistics)."""
    n = dataset.samples.shape[0]
    if n == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    correct = 0
    with T.no_grad():
        for start in range(0, n, batch_size):
            xb = dataset.samples[start:start + batch_size]
            logits = net.forward(_as_input(net, xb), training=False)
            pred = logits.data.argmax(axis=1)
            correct += int((pred == dataset.labels[start:start + batch_size]).sum())
    return correct / n


def _mean_breakdowns(parts: list[LossBreakdown]) -> LossBreakdown:
    def m(vals):
        return float(np.mean(vals))

    stone_keys = sorted(parts[0].stone_task)
    return LossBreakdown(
        task_student=m([p.task_student for p in parts]),
        distill_student=m([p.distill_student for p in parts]),
        cross_student=m([p.cross_student for p in parts]),
        stone_task={i: m([p.stone_task[i] for p in parts]) for i in stone_keys},
        stone_distill={i: m([p.stone_distill[i] for p in parts]) for i in stone_keys},
        stone_cross={i: m([p.stone_cross[i] for p in parts]) for i in stone_keys},
        task_total=m([p.task_total for p in parts]),
        distill_total=m([p.distill_total for p in parts]),
        cross_total=m([p.cross_total for p in parts]),
        warmup=parts[0].warmup,
        total=m([p.total for p in parts]),
    )


def train_run(settings: TrainSettings, train_ds: Dataset, test_ds: Dataset,
              seed: int, teacher: Optional[CompositeNet] = None) -> TrainReport:
    """Train a student under the plan; deterministic given (settings, seed).

    The teacher must be supplied (already frozen) whenever the plan uses
    distillation or stones. Stepping stones and connectors are training-time
    scaffolding only; they are not part of the returned student.
    """
    arch, plan = settings.arch, settings.plan
    _check_dataset(arch, train_ds, "train")
    _check_dataset(arch, test_ds, "test")

    needs_teacher = plan.beta > 0 or plan.effective_gamma() > 0 or plan.active_stones
    if needs_teacher and teacher is None:
        raise ConfigError("this plan distills from a teacher but none was provided")
    if teacher is not None and not teacher.frozen:
        raise ConfigError("the teacher must be frozen before distillation")

    init_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    _, student, connectors = build_factory_pair(arch, np.random.default_rng(init_ss))
    bundle = DistillBundle(student, teacher, connectors)

    trainable = list(student.named_parameters())
    if plan.active_stones:
        for conn in connectors:
            trainable += [(f"connectors.{conn.index}.{n}", p)
                          for n, p in conn.named_parameters()]

    opt = SGD(trainable, lr=settings.schedule.base_lr,
              momentum=settings.momentum, weight_decay=settings.weight_decay)
    shuffle_rng = np.random.default_rng(shuffle_ss)

    initial_train = evaluate(student, train_ds)
    initial_test = evaluate(student, test_ds)

    n = train_ds.samples.shape[0]
    # The teacher is frozen and always runs in eval mode, so its logits are
    # constants of the run; compute them once instead of once per epoch.
    teacher_logits = None
    if teacher is not None and needs_teacher:
        chunks = []
        with T.no_grad():
            for start in range(0, n, 256):
                xb = _as_input(teacher, train_ds.samples[start:start + 256])
                chunks.append(teacher.forward(xb, training=False).data)
        teacher_logits = np.concatenate(chunks, axis=0)

    rows: list[EpochRow] = []
    for epoch in range(settings.epochs):
        opt.lr = lr_at(settings.schedule, epoch)
        order = shuffle_rng.permutation(n)
        parts: list[LossBreakdown] = []
        batches = 0
        started = time.perf_counter()
        for start in range(0, n, settings.batch_size):
            idx = order[start:start + settings.batch_size]
            if idx.size < 2:
                continue  # train-mode batch norm needs at least 2 samples
            x = _as_input(student, train_ds.samples[idx])
            batch_teacher = teacher_logits[idx] if teacher_logits is not None else None
            loss, breakdown = total_loss(x, train_ds.labels[idx], bundle, plan,
                                         epoch, training=True,
                                         teacher_logits=batch_teacher)
            opt.zero_grad()
            loss.backward()
            opt.step()
            parts.append(breakdown)
            batches += 1
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        rows.append(EpochRow(
            epoch=epoch,
            lr=opt.lr,
            breakdown=_mean_breakdowns(parts),
            train_acc=evaluate(student, train_ds),
            test_acc=evaluate(student, test_ds),
            ms_per_batch=elapsed_ms / max(batches, 1),
        ))

    return TrainReport(initial_train_acc=initial_train,
                       initial_test_acc=initial_test,
                       rows=rows, student=student, teacher=teacher,
                       connectors=connectors)


def train_teacher(arch: ArchSpec, epochs: int, batch_size: int,
                  schedule: Schedule, train_ds: Dataset, test_ds: Dataset,
                  seed: int, momentum: float = 0.9,
                  weight_decay: float = 5e-4) -> tuple[CompositeNet, TrainReport]:
    """Fit the teacher architecture with the task loss only, then freeze it."""
    teacher_arch = ArchSpec(k=arch.k, in_channels=arch.in_channels,
                            in_size=arch.in_size,
                            teacher_widths=arch.teacher_widths,
                            student_widths=arch.teacher_widths,
                            strides=arch.strides,
                            teacher_depth=arch.teacher_depth,
                            student_depth=arch.teacher_depth,
                            kernel=arch.kernel, name=f"{arch.name}-teacher")
    plan = DistillPlan(n=arch.n, alpha=1.0, beta=0.0, gamma=0.0,
                       active_stones=(), warmup_epochs=0)
    settings = TrainSettings(arch=teacher_arch, plan=plan, epochs=epochs,
                             batch_size=batch_size, schedule=schedule,
                             momentum=momentum, weight_decay=weight_decay)
    report = train_run(settings, train_ds, test_ds, seed)
    teacher = report.student
    teacher.freeze()
    return teacher, report
