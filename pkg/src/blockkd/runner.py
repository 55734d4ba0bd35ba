"""Run orchestration: executes configured experiments and writes their outputs.

Every command writes into the config's output directory:

    metrics.csv      deterministic per-epoch metrics (byte-stable per seed)
    timing.csv       wall-clock ms per batch (kept apart from metrics so the
                     metrics file is byte-identical across repeat runs)
    student.bkdc     trained student only; no connectors, no teacher
    config.resolved  replayable copy of the configuration
    fig_*.png        rendered charts next to the delimited output
"""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import plots
from .config import ExperimentConfig
from .data import CheckpointMeta, Dataset, load_checkpoint, load_checkpoint_meta, \
    save_checkpoint
from .errors import ConfigError
from .nn import CompositeNet
from .trainer import TrainReport, train_run, train_teacher, TrainSettings


def metrics_fieldnames(n: int) -> list[str]:
    fields = ["epoch", "lr", "warmup", "L_task", "L_distill", "L_cross",
              "task_s", "distill_s", "cross_s"]
    for i in range(1, n + 1):
        fields += [f"task_n{i}", f"distill_n{i}", f"cross_n{i}"]
    fields += ["train_acc", "test_acc"]
    return fields


def metrics_rows(report: TrainReport, n: int) -> list[dict]:
    """Per-epoch metric dicts; the epoch=-1 row is the pre-training evaluation."""
    rows = [{name: 0.0 for name in metrics_fieldnames(n)}]
    rows[0].update(epoch=-1, train_acc=report.initial_train_acc,
                   test_acc=report.initial_test_acc)
    for row in report.rows:
        b = row.breakdown
        entry = {
            "epoch": row.epoch, "lr": row.lr, "warmup": b.warmup,
            "L_task": b.task_total, "L_distill": b.distill_total,
            "L_cross": b.cross_total, "task_s": b.task_student,
            "distill_s": b.distill_student, "cross_s": b.cross_student,
            "train_acc": row.train_acc, "test_acc": row.test_acc,
        }
        for i in range(1, n + 1):
            entry[f"task_n{i}"] = b.stone_task.get(i, 0.0)
            entry[f"distill_n{i}"] = b.stone_distill.get(i, 0.0)
            entry[f"cross_n{i}"] = b.stone_cross.get(i, 0.0)
        rows.append(entry)
    return rows


def _write_csv(path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})


def write_metrics(out_dir: Path, report: TrainReport, n: int) -> None:
    rows = metrics_rows(report, n)
    _write_csv(out_dir / "metrics.csv", metrics_fieldnames(n), rows)
    _write_csv(out_dir / "timing.csv", ["epoch", "ms_per_batch"],
               [{"epoch": r.epoch, "ms_per_batch": r.ms_per_batch}
                for r in report.rows])
    plots.save_training_curves(rows, out_dir / "fig_losses.png",
                               out_dir / "fig_accuracy.png")


def teacher_for(cfg: ExperimentConfig, train_ds: Dataset, test_ds: Dataset,
                cache_path: Optional[Path] = None) -> CompositeNet:
    """Load the configured teacher checkpoint, or pretrain one in-run.

    A pretrained teacher is cached when ``cache_path`` is given so grid runs
    sharing a seed reuse it.
    """
    expect = cfg.arch.hash_u64()
    if cfg.teacher_checkpoint:
        return load_checkpoint(cfg.teacher_checkpoint, expect_spec_hash=expect)
    if cache_path is not None and cache_path.exists():
        return load_checkpoint(cache_path, expect_spec_hash=expect)
    teacher, report = train_teacher(cfg.arch, epochs=cfg.teach_epochs,
                                    batch_size=cfg.batch_size,
                                    schedule=cfg.teach_schedule(),
                                    train_ds=train_ds, test_ds=test_ds,
                                    seed=cfg.seed, momentum=cfg.momentum,
                                    weight_decay=cfg.weight_decay)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(teacher, cache_path,
                        CheckpointMeta(spec_hash=expect, seed=cfg.seed,
                                       epoch=cfg.teach_epochs, frozen=True))
    return teacher


def run_train(cfg: ExperimentConfig, teacher: Optional[CompositeNet] = None,
              write: bool = True) -> tuple[TrainReport, Path]:
    """Execute one training run per the config; returns the report and out dir."""
    cfg.check_files()
    train_ds, test_ds = cfg.datasets()
    if teacher is None and cfg.needs_teacher():
        teacher = teacher_for(cfg, train_ds, test_ds)
    settings = TrainSettings(arch=cfg.arch, plan=cfg.plan(), epochs=cfg.epochs,
                             batch_size=cfg.batch_size, schedule=cfg.schedule(),
                             momentum=cfg.momentum,
                             weight_decay=cfg.weight_decay)
    report = train_run(settings, train_ds, test_ds, cfg.seed, teacher=teacher)

    out_dir = cfg.resolved_out_dir()
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics(out_dir, report, cfg.arch.n)
        save_checkpoint(report.student, out_dir / "student.bkdc",
                        CheckpointMeta(spec_hash=cfg.arch.hash_u64(),
                                       seed=cfg.seed, epoch=cfg.epochs))
        (out_dir / "config.resolved").write_text(cfg.resolved_ini())
    return report, out_dir


def run_teach(cfg: ExperimentConfig) -> tuple[TrainReport, Path]:
    """Pretrain the teacher with the task loss only and checkpoint it."""
    cfg.check_files()
    train_ds, test_ds = cfg.datasets()
    teacher, report = train_teacher(cfg.arch, epochs=cfg.teach_epochs,
                                    batch_size=cfg.batch_size,
                                    schedule=cfg.teach_schedule(),
                                    train_ds=train_ds, test_ds=test_ds,
                                    seed=cfg.seed, momentum=cfg.momentum,
                                    weight_decay=cfg.weight_decay)
    out_dir = cfg.resolved_out_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = metrics_rows(report, cfg.arch.n)
    _write_csv(out_dir / "teacher_metrics.csv", metrics_fieldnames(cfg.arch.n),
               rows)
    plots.save_training_curves(rows, out_dir / "fig_teacher_losses.png",
                               out_dir / "fig_teacher_accuracy.png")
    save_checkpoint(teacher, out_dir / "teacher.bkdc",
                    CheckpointMeta(spec_hash=cfg.arch.hash_u64(), seed=cfg.seed,
                                   epoch=cfg.teach_epochs, frozen=True))
    (out_dir / "config.resolved").write_text(cfg.resolved_ini())
    return report, out_dir


# ---------------------------------------------------------------------------
# ablation grids


def losses_grid() -> list[dict]:
    """Variant rows toggling the stone objectives and the cross term."""
    return [
        dict(variant="task", mode="scratch"),
        dict(variant="task+sdistill", mode="kd"),
        dict(variant="task+sdistill+ndistill", mode="blockkd",
             stone_task=False, gamma=0.0),
        dict(variant="task+sdistill+ndistill+cross", mode="blockkd",
             stone_task=False),
        dict(variant="task+sdistill+ntask+ndistill", mode="blockkd", gamma=0.0),
        dict(variant="full", mode="blockkd"),
    ]


def stones_grid(subsets: Optional[list[tuple[int, ...]]] = None,
                n: int = 3) -> list[dict]:
    if subsets is None:
        subsets = [(), tuple(range(2, n + 1)), tuple(range(1, n + 1))]
    rows = []
    for subset in subsets:
        name = "stones_" + ("_".join(map(str, subset)) if subset else "none")
        if subset:
            rows.append(dict(variant=name, mode="blockkd", stones=subset))
        else:
            rows.append(dict(variant=name, mode="kd"))
    return rows


def parse_grid(spec: str, n: int) -> list[dict]:
    if spec == "losses":
        return losses_grid()
    if spec == "stones":
        return stones_grid(n=n)
    if spec.startswith("stones:"):
        subsets = []
        for part in spec[len("stones:"):].split(";"):
            part = part.strip()
            subsets.append(tuple(int(v) for v in part.split(",")) if part else ())
        return stones_grid(subsets, n=n)
    raise ConfigError(f"unknown grid '{spec}' (use 'losses', 'stones', or "
                      f"'stones:i,j;...')")


def apply_variant(cfg: ExperimentConfig, variant: dict, seed: int,
                  cell_dir: str) -> ExperimentConfig:
    out = cfg.with_overrides(seed=seed, mode=variant.get("mode", cfg.mode),
                             stones=variant.get("stones"), out_dir=cell_dir)
    if "gamma" in variant:
        out = replace(out, gamma=variant["gamma"])
    if "stone_task" in variant:
        out = replace(out, stone_task=variant["stone_task"])
    if "stone_distill" in variant:
        out = replace(out, stone_distill=variant["stone_distill"])
    return out


def run_compare(cfg: ExperimentConfig, grid_spec: str, seeds: list[int],
                write_cells: bool = True) -> tuple[list[dict], Path]:
    """Run the grid x seeds matrix and aggregate accuracy and timing.

    One teacher per seed is pretrained (or loaded) once and shared by every
    variant at that seed, so the comparison is paired.
    """
    cfg.check_files()
    variants = parse_grid(grid_spec, cfg.arch.n)
    out_root = cfg.resolved_out_dir()
    out_root.mkdir(parents=True, exist_ok=True)

    results: dict[str, list[tuple[float, float]]] = {v["variant"]: []
                                                     for v in variants}
    for seed in seeds:
        seed_cfg = cfg.with_overrides(seed=seed)
        train_ds, test_ds = seed_cfg.datasets()
        teacher = teacher_for(seed_cfg, train_ds, test_ds,
                              cache_path=out_root / "teachers"
                              / f"teacher_s{seed}.bkdc")
        for variant in variants:
            cell = apply_variant(cfg, variant, seed,
                                 str(Path(cfg.out_dir)
                                     / f"{variant['variant']}_s{seed}"))
            report, _ = run_train(cell, teacher=teacher, write=write_cells)
            results[variant["variant"]].append(
                (report.final_test_acc, report.mean_ms_per_batch))

    summary = []
    for variant in variants:
        accs = np.array([a for a, _ in results[variant["variant"]]])
        times = np.array([t for _, t in results[variant["variant"]]])
        summary.append({
            "variant": variant["variant"],
            "seeds": len(seeds),
            "test_acc_mean": float(accs.mean()),
            "test_acc_std": float(accs.std()),
            "ms_per_batch_mean": float(times.mean()),
        })
    _write_csv(out_root / "summary.csv",
               ["variant", "seeds", "test_acc_mean", "test_acc_std",
                "ms_per_batch_mean"], summary)
    plots.save_compare_chart(summary, out_root / "fig_compare.png")
    return summary, out_root
