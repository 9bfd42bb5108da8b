"""Desk-scale experimental suite: directional checks of the distillation claims.

Teachers are pretrained on their own synthetic split, disjoint from the
student's, then distilled into students under paired arms that share seeds,
batch order and augmentation. ``python3 -m uhkd.suite`` runs everything and
prints a summary; the acceptance tests call :func:`run_suite` and assert on
the returned tables.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import DistillRecipe, recipe_with
from .data import DatasetHandle, synth_dataset
from .engine import ABLATION_ARMS, TeacherCache, accuracy, distill, pretrain_teacher
from .models import Model, build_model
from .runtime import tune_allocator

log = logging.getLogger(__name__)

CROSS_PAIRS = (("attn_t", "cnn_s"), ("mlp_t", "cnn_s"), ("cnn_t", "attn_s"), ("cnn_t", "mlp_s"))


@dataclass
class SuiteConfig:
    image_size: int = 16
    num_classes: int = 10
    teacher_per_class: int = 100
    teacher_data_seed: int = 1
    teacher_epochs: int = 80
    student_per_class: int = 40
    student_data_seed: int = 0
    student_val_fraction: float = 0.5
    epochs: int = 40
    batch_size: int = 32
    lr: float = 3e-3
    tau: float = 1.0
    seeds: tuple[int, ...] = (0, 1, 2)
    distill_pairs: tuple[tuple[str, str], ...] = CROSS_PAIRS
    ablation_pairs: tuple[tuple[str, str], ...] = CROSS_PAIRS[1:]
    stage_pair: tuple[str, str] = ("mlp_t", "cnn_s")

    def base_recipe(self) -> DistillRecipe:
        return DistillRecipe(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             tau=self.tau).validate()


def interp_arms(teacher: str, student: str) -> tuple[str, ...]:
    """Interpolation baselines that apply to a pairing."""
    both_grid = teacher.startswith("cnn") and student.startswith("cnn")
    return ("bilinear", "nearest") if both_grid else ("linear", "nearest")


def arms_for(cfg: SuiteConfig, pair: tuple[str, str]) -> dict[str, dict]:
    """Every arm a pair needs across the criteria, in run order."""
    arms: dict[str, dict] = {}
    if pair in cfg.distill_pairs:
        arms["ce_only"] = ABLATION_ARMS["ce_only"]
        arms["full"] = {}
    if pair in cfg.ablation_pairs:
        arms["full"] = {}
        for name in ("no_fft", "no_filter", "no_downsample", *interp_arms(*pair), "random_init"):
            arms[name] = ABLATION_ARMS[name]
    if pair == cfg.stage_pair:
        arms["full"] = {}
        for s in (1, 2, 3, 4):
            arms[f"stages_{s}"] = {"stages": (s,)}
    return arms


@dataclass
class RunResult:
    teacher: str
    student: str
    arm: str
    seed: int
    val_acc: float
    train_acc: float
    seconds: float
    cos_raw: dict[int, float | None] = field(default_factory=dict)
    cos_uhkd: dict[int, float | None] = field(default_factory=dict)


@dataclass
class SuiteResult:
    config: dict
    teacher_acc: dict[str, float]
    runs: list[RunResult]
    seconds: float

    def mean_acc(self, teacher: str, student: str, arm: str) -> float:
        vals = [r.val_acc for r in self.runs if (r.teacher, r.student, r.arm) == (teacher, student, arm)]
        if not vals:
            raise KeyError(f"no runs for {teacher}->{student} arm {arm}")
        return float(np.mean(vals))

    def stage_cosines(self, arm: str = "full") -> dict[int, tuple[float, float]]:
        """stage -> (mean raw cosine, mean aligned cosine) over every run of ``arm``."""
        out = {}
        for s in (1, 2, 3, 4):
            raw = [r.cos_raw[s] for r in self.runs if r.arm == arm and r.cos_raw.get(s) is not None]
            ali = [r.cos_uhkd[s] for r in self.runs if r.arm == arm and r.cos_uhkd.get(s) is not None]
            out[s] = (float(np.mean(raw)), float(np.mean(ali)))
        return out

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "teacher_acc": self.teacher_acc,
                           "runs": [asdict(r) for r in self.runs], "seconds": self.seconds}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> SuiteResult:
        d = json.loads(text)
        runs = []
        for r in d["runs"]:
            r["cos_raw"] = {int(k): v for k, v in r["cos_raw"].items()}
            r["cos_uhkd"] = {int(k): v for k, v in r["cos_uhkd"].items()}
            runs.append(RunResult(**r))
        return cls(d["config"], d["teacher_acc"], runs, d["seconds"])


def datasets(cfg: SuiteConfig) -> tuple[DatasetHandle, DatasetHandle]:
    teacher_ds = synth_dataset(cfg.num_classes, cfg.teacher_per_class, cfg.image_size, cfg.teacher_data_seed, 0.2)
    student_ds = synth_dataset(cfg.num_classes, cfg.student_per_class, cfg.image_size, cfg.student_data_seed,
                               cfg.student_val_fraction)
    return teacher_ds, student_ds


def run_suite(cfg: SuiteConfig | None = None, progress=None) -> SuiteResult:
    cfg = cfg or SuiteConfig()
    tune_allocator()
    t0 = time.perf_counter()
    teacher_ds, student_ds = datasets(cfg)
    base = cfg.base_recipe()
    pairs = list(dict.fromkeys(cfg.distill_pairs + cfg.ablation_pairs + (cfg.stage_pair,)))

    teachers: dict[str, Model] = {}
    teacher_acc: dict[str, float] = {}
    for name in dict.fromkeys(t for t, _ in pairs):
        teachers[name] = pretrain_teacher(name, teacher_ds, cfg.teacher_epochs, 0, cfg.lr, cfg.batch_size, base)
        teacher_acc[name] = accuracy(teachers[name], *student_ds.split("val"))
        if progress:
            progress(f"teacher {name}: val acc on student split {teacher_acc[name]:.3f}")

    runs: list[RunResult] = []
    cache = TeacherCache()
    for t_name, s_name in pairs:
        arms = arms_for(cfg, (t_name, s_name))
        for seed in cfg.seeds:
            cache.clear()
            for arm, changes in arms.items():
                t1 = time.perf_counter()
                recipe = recipe_with(base, seed=seed, **changes)
                student = build_model(s_name, seed=seed, image_size=cfg.image_size, num_classes=cfg.num_classes)
                rep = distill(teachers[t_name], student, recipe, student_ds, cache=cache)
                last = rep.similarity[-1]
                res = RunResult(t_name, s_name, arm, seed, rep.final_val_acc, rep.train_acc[-1],
                                time.perf_counter() - t1,
                                {k: v.cos_raw for k, v in last.items()},
                                {k: v.cos_uhkd for k, v in last.items()})
                runs.append(res)
                if progress:
                    progress(f"{t_name}->{s_name} {arm:<14} seed {seed}: val {res.val_acc:.3f} "
                             f"({res.seconds:.1f}s)")
    cache.clear()
    return SuiteResult(asdict(cfg), teacher_acc, runs, time.perf_counter() - t0)


def summary_table(res: SuiteResult) -> str:
    by_pair: dict[tuple[str, str], list[str]] = {}
    for r in res.runs:
        arms = by_pair.setdefault((r.teacher, r.student), [])
        if r.arm not in arms:
            arms.append(r.arm)
    lines = []
    for (t, s), arms in by_pair.items():
        lines.append(f"{t} -> {s}")
        for arm in arms:
            lines.append(f"  {arm:<14} {res.mean_acc(t, s, arm):.4f}")
    lines.append(f"total {res.seconds:.0f}s")
    return "\n".join(lines)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python3 -m uhkd.suite", description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=SuiteConfig.epochs)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--json", help="write the raw results here")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)
    cfg = SuiteConfig(epochs=args.epochs, seeds=tuple(int(s) for s in args.seeds.split(",")))
    res = run_suite(cfg, progress=lambda m: print(m, flush=True))
    print(summary_table(res))
    if args.json:
        Path(args.json).write_text(res.to_json())
    return 0


if __name__ == "__main__":
    sys.exit(main())
