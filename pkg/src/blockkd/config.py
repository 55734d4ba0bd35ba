"""Experiment configuration: one INI file fully determines a run.

Sections: [arch] network pair, [data] dataset, [plan] distillation weights,
[optim] student optimizer/schedule, [teach] teacher pretraining, [run] seed,
mode, and output directory. ``resolved_ini`` serializes the configuration
back out (with CLI overrides applied) so any run can be replayed
byte-for-byte from its ``config.resolved``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import DistillPlan
from .data import Dataset, gen_synthetic, load_idx_like
from .errors import ConfigError
from .nn import ArchSpec, PRESETS
from .trainer import Schedule

MODES = ("scratch", "kd", "blockkd")


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


@dataclass
class ExperimentConfig:
    arch: ArchSpec
    data_kind: str
    data_n: int
    data_test_n: int
    data_noise: float
    data_seed: int
    data_paths: dict
    standardize: bool
    alpha: float
    beta: float
    gamma: float
    tau: float
    stones: tuple[int, ...]
    warmup_epochs: int
    coeff_in_cross: bool
    stone_task: bool
    stone_distill: bool
    lr: float
    momentum: float
    weight_decay: float
    milestones: tuple[int, ...]
    epochs: int
    batch_size: int
    teach_epochs: int
    teach_lr: float
    teach_milestones: tuple[int, ...]
    seed: int
    mode: str
    out_dir: str
    teacher_checkpoint: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")

    # -- derived objects ----------------------------------------------------

    def plan(self) -> DistillPlan:
        """DistillPlan with the run mode folded in."""
        if self.mode == "scratch":
            return DistillPlan(n=self.arch.n, alpha=self.alpha, beta=0.0,
                               gamma=0.0, tau=self.tau, active_stones=(),
                               warmup_epochs=0)
        stones = () if self.mode == "kd" else self.stones
        gamma = 0.0 if self.mode == "kd" else self.gamma
        return DistillPlan(n=self.arch.n, alpha=self.alpha, beta=self.beta,
                           gamma=gamma, tau=self.tau, active_stones=stones,
                           warmup_epochs=self.warmup_epochs,
                           coeff_in_cross=self.coeff_in_cross,
                           include_stone_task=self.stone_task,
                           include_stone_distill=self.stone_distill)

    def schedule(self) -> Schedule:
        return Schedule(base_lr=self.lr, milestones=self.milestones)

    def teach_schedule(self) -> Schedule:
        return Schedule(base_lr=self.teach_lr, milestones=self.teach_milestones)

    def needs_teacher(self) -> bool:
        return self.mode != "scratch"

    def resolved_out_dir(self) -> Path:
        root = os.environ.get("BKD_OUT", "")
        return Path(root) / self.out_dir if root else Path(self.out_dir)

    def datasets(self) -> tuple[Dataset, Dataset]:
        if self.data_kind == "idx":
            train = load_idx_like(self.data_paths["path"],
                                  self.data_paths.get("labels_path") or None,
                                  split="train")
            test = load_idx_like(self.data_paths["test_path"],
                                 self.data_paths.get("test_labels_path") or None,
                                 split="test")
        else:
            train, test = gen_synthetic(self.data_kind, k=self.arch.k,
                                        n=self.data_n, seed=self.data_seed,
                                        noise=self.data_noise,
                                        test_n=self.data_test_n)
        if self.standardize:
            axes = tuple(i for i in range(train.samples.ndim) if i != 1)
            mean = train.samples.mean(axis=axes, keepdims=True)
            std = train.samples.std(axis=axes, keepdims=True) + 1e-8
            train = Dataset((train.samples - mean) / std, train.labels, "train")
            test = Dataset((test.samples - mean) / std, test.labels, "test")
        return train, test

    def check_files(self) -> None:
        """Every referenced file must exist before any training starts."""
        if self.teacher_checkpoint and not Path(self.teacher_checkpoint).exists():
            raise ConfigError(
                f"teacher checkpoint '{self.teacher_checkpoint}' does not exist")
        if self.data_kind == "idx":
            for key in ("path", "test_path"):
                value = self.data_paths.get(key, "")
                if not value:
                    raise ConfigError(f"data kind 'idx' needs [data] {key}")
                if not Path(value).exists():
                    raise ConfigError(f"dataset file '{value}' does not exist")
            for key in ("labels_path", "test_labels_path"):
                value = self.data_paths.get(key, "")
                if value and not Path(value).exists():
                    raise ConfigError(f"labels file '{value}' does not exist")

    # -- overrides and serialization ----------------------------------------

    def with_overrides(self, seed: Optional[int] = None,
                       stones: Optional[tuple[int, ...]] = None,
                       mode: Optional[str] = None,
                       out_dir: Optional[str] = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if stones is not None:
            cfg = replace(cfg, stones=tuple(stones))
        if mode is not None:
            cfg = replace(cfg, mode=mode)
        if out_dir is not None:
            cfg = replace(cfg, out_dir=out_dir)
        return cfg

    def resolved_ini(self) -> str:
        p = configparser.ConfigParser()
        a = self.arch
        p["arch"] = {
            "k": str(a.k), "in_channels": str(a.in_channels),
            "in_size": str(a.in_size),
            "teacher_widths": ",".join(map(str, a.teacher_widths)),
            "student_widths": ",".join(map(str, a.student_widths)),
            "strides": ",".join(map(str, a.strides)),
            "teacher_depth": str(a.teacher_depth),
            "student_depth": str(a.student_depth),
            "kernel": str(a.kernel),
        }
        p["data"] = {
            "kind": self.data_kind, "n": str(self.data_n),
            "test_n": str(self.data_test_n), "noise": repr(self.data_noise),
            "seed": str(self.data_seed),
            "standardize": str(self.standardize).lower(),
            **{k: v for k, v in self.data_paths.items() if v},
        }
        p["plan"] = {
            "alpha": repr(self.alpha), "beta": repr(self.beta),
            "gamma": repr(self.gamma), "tau": repr(self.tau),
            "stones": ",".join(map(str, self.stones)),
            "warmup_epochs": str(self.warmup_epochs),
            "coeff_in_cross": str(self.coeff_in_cross).lower(),
            "stone_task": str(self.stone_task).lower(),
            "stone_distill": str(self.stone_distill).lower(),
        }
        p["optim"] = {
            "lr": repr(self.lr), "momentum": repr(self.momentum),
            "weight_decay": repr(self.weight_decay),
            "milestones": ",".join(map(str, self.milestones)),
            "epochs": str(self.epochs), "batch_size": str(self.batch_size),
        }
        p["teach"] = {
            "epochs": str(self.teach_epochs), "lr": repr(self.teach_lr),
            "milestones": ",".join(map(str, self.teach_milestones)),
        }
        p["run"] = {
            "seed": str(self.seed), "mode": self.mode, "out_dir": self.out_dir,
            "teacher_checkpoint": self.teacher_checkpoint,
        }
        lines = []
        for section in ("arch", "data", "plan", "optim", "teach", "run"):
            lines.append(f"[{section}]")
            for key, value in p[section].items():
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file '{path}' does not exist")
    p = configparser.ConfigParser()
    try:
        p.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse '{path}': {exc}") from exc

    try:
        arch_sec = p["arch"] if p.has_section("arch") else {}
        preset = arch_sec.get("preset", "")
        if preset:
            if preset not in PRESETS:
                raise ConfigError(f"unknown architecture preset '{preset}' "
                                  f"(choose from {sorted(PRESETS)})")
            arch = PRESETS[preset]
        else:
            arch = ArchSpec(
                k=int(arch_sec.get("k", "4")),
                in_channels=int(arch_sec.get("in_channels", "3")),
                in_size=int(arch_sec.get("in_size", "8")),
                teacher_widths=_ints(arch_sec.get("teacher_widths", "8,16,32")),
                student_widths=_ints(arch_sec.get("student_widths", "4,8,16")),
                strides=_ints(arch_sec.get("strides", "1,3,3")),
                teacher_depth=int(arch_sec.get("teacher_depth", "2")),
                student_depth=int(arch_sec.get("student_depth", "1")),
                kernel=int(arch_sec.get("kernel", "3")),
            )

        data = p["data"] if p.has_section("data") else {}
        plan = p["plan"] if p.has_section("plan") else {}
        optim = p["optim"] if p.has_section("optim") else {}
        teach = p["teach"] if p.has_section("teach") else {}
        run = p["run"] if p.has_section("run") else {}

        def as_bool(text: str) -> bool:
            return text.strip().lower() in ("1", "true", "yes", "on")

        return ExperimentConfig(
            arch=arch,
            data_kind=data.get("kind", "tiny_images"),
            data_n=int(data.get("n", "2000")),
            data_test_n=int(data.get("test_n", "800")),
            data_noise=float(data.get("noise", "1.5")),
            data_seed=int(data.get("seed", "2024")),
            data_paths={k: data.get(k, "") for k in
                        ("path", "labels_path", "test_path", "test_labels_path")},
            standardize=as_bool(data.get("standardize", "false")),
            alpha=float(plan.get("alpha", "1.0")),
            beta=float(plan.get("beta", "1.0")),
            gamma=float(plan.get("gamma", "1.0")),
            tau=float(plan.get("tau", "4.0")),
            stones=_ints(plan.get("stones", ",".join(
                str(i + 1) for i in range(arch.n)))),
            warmup_epochs=int(plan.get("warmup_epochs", "10")),
            coeff_in_cross=as_bool(plan.get("coeff_in_cross", "true")),
            stone_task=as_bool(plan.get("stone_task", "true")),
            stone_distill=as_bool(plan.get("stone_distill", "true")),
            lr=float(optim.get("lr", "0.05")),
            momentum=float(optim.get("momentum", "0.9")),
            weight_decay=float(optim.get("weight_decay", "5e-4")),
            milestones=_ints(optim.get("milestones", "30,45")),
            epochs=int(optim.get("epochs", "60")),
            batch_size=int(optim.get("batch_size", "64")),
            teach_epochs=int(teach.get("epochs", "60")),
            teach_lr=float(teach.get("lr", optim.get("lr", "0.05"))),
            teach_milestones=_ints(teach.get("milestones",
                                             optim.get("milestones", "30,45"))),
            seed=int(run.get("seed", "0")),
            mode=run.get("mode", "blockkd"),
            out_dir=run.get("out_dir", "runs/exp"),
            teacher_checkpoint=run.get("teacher_checkpoint", ""),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid value in '{path}': {exc}") from exc
