"""Command-line entry point: ``uhkd <verb> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, spectral
from . import tensor as T
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import DatasetError, DatasetHandle, load_external, synth_dataset
from .engine import (
    Aligner,
    TrainingDiverged,
    accuracy,
    distill,
    load_model,
    pretrain_teacher,
    run_ablation_suite,
    save_model,
    similarity_probe,
)
from .fam import student_magnitude
from .features import Source
from .ftm import ftm_forward
from .models import PRESETS, build_model
from .runtime import tune_allocator
from .tensor import Tensor

log = logging.getLogger("uhkd")

VERBS = ("pretrain", "distill", "eval", "ablate", "inspect", "similarity")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uhkd", description="Frequency-domain heterogeneous knowledge distillation.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="recipe seed (overrides the config)")
    p.add_argument("--out-dir", default="runs", help="every output is written under this directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--checkpoint", help="student checkpoint (eval, inspect, similarity)")
    p.add_argument("--seeds", default="0", help="comma-separated seeds for ablate")
    p.add_argument("--arms", default="", help="comma-separated arm names for ablate (default: all)")
    p.add_argument("--batch", type=int, default=8, help="batch size for inspect / similarity")
    p.add_argument("--echo-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def make_dataset(cfg: ExperimentConfig) -> DatasetHandle:
    if cfg.data_dir:
        return load_external(cfg.data_dir)
    return synth_dataset(cfg.num_classes, cfg.n_per_class, cfg.image_size, cfg.data_seed,
                         cfg.val_fraction, cfg.noise)


def _teacher(cfg: ExperimentConfig, ds: DatasetHandle, out_dir: Path):
    if cfg.teacher_ckpt:
        return load_model(cfg.teacher_ckpt, "teacher", Source.TEACHER)
    path = out_dir / "teacher.ckpt"
    if path.exists():
        return load_model(path, "teacher", Source.TEACHER)
    teacher = pretrain_teacher(cfg.teacher, ds, cfg.teacher_epochs, cfg.teacher_seed, cfg.teacher_lr,
                               cfg.recipe.batch_size, cfg.recipe)
    save_model(path, teacher, "teacher", {"preset": cfg.teacher})
    return teacher


def _student_path(args, out_dir: Path) -> Path:
    return Path(args.checkpoint) if args.checkpoint else out_dir / "student.ckpt"


def _aligner_for(path: Path, teacher, student, ds: DatasetHandle):
    from .config import DistillRecipe

    entries, meta = checkpoint.load(path)
    recipe = DistillRecipe(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["recipe"].items()})
    probe = Tensor(ds.images[:2])
    with T.no_grad():
        _, tt = teacher.forward_with_taps(probe)
        _, st = student.forward_with_taps(probe)
    aligner = Aligner(recipe, tt, st, T.make_rng(recipe.seed, 0xFA3))
    if recipe.lambda_mse > 0:
        aligner.load_state(entries)
    return aligner, recipe


def cmd_pretrain(cfg, args, out_dir: Path) -> int:
    ds = make_dataset(cfg)
    hist: list[float] = []
    teacher = pretrain_teacher(cfg.teacher, ds, cfg.teacher_epochs, cfg.teacher_seed, cfg.teacher_lr,
                               cfg.recipe.batch_size, cfg.recipe, history=hist)
    digest = save_model(out_dir / "teacher.ckpt", teacher, "teacher", {"preset": cfg.teacher})
    acc = accuracy(teacher, *ds.split("val"))
    print(f"teacher={cfg.teacher} train_acc={hist[-1]:.4f} val_acc={acc:.4f} digest={digest}")
    return 0


def cmd_distill(cfg, args, out_dir: Path) -> int:
    ds = make_dataset(cfg)
    teacher = _teacher(cfg, ds, out_dir)
    student = build_model(cfg.student, seed=cfg.recipe.seed, image_size=ds.image_size,
                          num_classes=ds.num_classes)
    report = distill(teacher, student, cfg.recipe, ds, out_dir=out_dir, student_name=cfg.student)
    print(f"val_acc={report.final_val_acc:.4f} train_acc={report.train_acc[-1]:.4f} "
          f"checkpoint={report.checkpoint_digest}")
    return 0


def cmd_eval(cfg, args, out_dir: Path) -> int:
    ds = make_dataset(cfg)
    student = load_model(_student_path(args, out_dir), "student")
    print(f"val_acc={accuracy(student, *ds.split('val')):.4f}")
    return 0


def cmd_ablate(cfg, args, out_dir: Path) -> int:
    from .engine import ablation_arms

    ds = make_dataset(cfg)
    teacher = _teacher(cfg, ds, out_dir)
    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    arms = ablation_arms()
    if args.arms:
        wanted = [a.strip() for a in args.arms.split(",") if a.strip()]
        unknown = [a for a in wanted if a not in arms]
        if unknown:
            raise ConfigError(f"unknown arms {unknown}; known: {sorted(arms)}")
        arms = {a: arms[a] for a in wanted}
    rows = run_ablation_suite(cfg.recipe, ds, teacher, cfg.student, seeds, arms,
                              out_csv=out_dir / "ablation.csv", teacher_name=cfg.teacher,
                              student_name=cfg.student)
    for r in rows:
        acc = r.get("val_acc")
        print(f"{r['arm']:<16} seed={r['seed']} val_acc={acc if acc is None else f'{acc:.4f}'} {r['status']}")
    return 0


def cmd_inspect(cfg, args, out_dir: Path) -> int:
    ds = make_dataset(cfg)
    teacher = _teacher(cfg, ds, out_dir)
    path = _student_path(args, out_dir)
    student = load_model(path, "student")
    aligner, recipe = _aligner_for(path, teacher, student, ds)
    x = Tensor(ds.split("val")[0][: args.batch])
    dump_dir = out_dir / "spectra"
    dump_dir.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        _, tt = teacher.forward_with_taps(x)
        _, st = student.forward_with_taps(x)
        pairs = aligner.pairs(tt, st) if recipe.lambda_mse > 0 else {}
        for tf, sf in zip(tt, st):
            k = tf.stage
            for tag, f in (("teacher", tf), ("student", sf)):
                spec = spectral.center_shift(spectral.fft_forward(f.tensor, f.layout))
                spectral.dump_spectrum(spec, dump_dir / f"stage{k}_{tag}_spectrum.uhkdspec")
            t_out = pairs[k][0] if k in pairs else ftm_forward(tf, aligner.ftm_cfg)
            zeros = np.zeros(t_out.shape)
            (dump_dir / f"stage{k}_ftm.uhkdspec").write_bytes(spectral.encode_spectrum(t_out.tensor.data, zeros))
            if k in pairs:
                s_out = pairs[k][1]
                (dump_dir / f"stage{k}_fam.uhkdspec").write_bytes(
                    spectral.encode_spectrum(s_out.tensor.data, np.zeros(s_out.shape))
                )
            mag = student_magnitude(sf)
            (dump_dir / f"stage{k}_student_magnitude.uhkdspec").write_bytes(
                spectral.encode_spectrum(mag.data, np.zeros(mag.shape))
            )
    print(f"wrote {len(list(dump_dir.glob('*.uhkdspec')))} spectra to {dump_dir}")
    return 0


def cmd_similarity(cfg, args, out_dir: Path) -> int:
    ds = make_dataset(cfg)
    teacher = _teacher(cfg, ds, out_dir)
    path = _student_path(args, out_dir)
    student = load_model(path, "student")
    aligner, recipe = _aligner_for(path, teacher, student, ds)
    x = Tensor(ds.split("val")[0][: max(args.batch, 2)])
    with T.no_grad():
        _, tt = teacher.forward_with_taps(x)
        _, st = student.forward_with_taps(x)
        pairs = aligner.pairs(tt, st) if recipe.lambda_mse > 0 else {}
    sims = similarity_probe(tt, st, pairs)
    out = out_dir / "similarity.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "cos_raw", "cos_uhkd", "pearson_raw", "pearson_uhkd"])
        for k, v in sorted(sims.items()):
            w.writerow([k] + ["" if c is None else repr(c) for c in
                              (v.cos_raw, v.cos_uhkd, v.pearson_raw, v.pearson_uhkd)])
    for k, v in sorted(sims.items()):
        print(f"stage {k}: cos_raw={v.cos_raw} cos_uhkd={v.cos_uhkd} "
              f"pearson_raw={v.pearson_raw} pearson_uhkd={v.pearson_uhkd}")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect": cmd_inspect,
    "similarity": cmd_similarity,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv:
            raise UsageError("no verb given")
        args = parser.parse_args(argv)
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        if cfg.teacher not in PRESETS or cfg.student not in PRESETS:
            raise ConfigError(f"teacher/student must be one of {sorted(PRESETS)}")
    except (UsageError, ConfigError) as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.echo_config:
        print(dump_config(cfg), end="")
        return 0
    tune_allocator()
    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.verb](cfg, args, out_dir)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, T.NonFiniteError, checkpoint.CheckpointError, DatasetError,
            OSError, KeyError, ValueError) as exc:
        print(f"aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
