"""Teacher pretraining, frequency-domain distillation, similarity probes and ablations."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import DistillRecipe, recipe_with
from .data import DatasetHandle, augment
from .fam import FamParams, fam_forward, fam_init, interp_align, student_spectral_tokens
from .features import Layout, Source, StageFeature
from .ftm import FtmConfig, ftm_forward, ftm_output_shape, standardize_target, teacher_grid
from .losses import LossBreakdown, cross_entropy_smoothed, total_loss
from .models import Model, ModelSpec, build_model
from .optim import AdamW, clip_global_norm, lr_schedule
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "epoch",
    "split",
    "acc",
    "mse",
    "kl",
    "ce",
    "total",
    "stage",
    "cos_raw",
    "cos_uhkd",
    "pearson_raw",
    "pearson_uhkd",
)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# evaluation helpers


def predict(model: Model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    preds = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits = model(Tensor(images[i : i + batch_size]))
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float((predict(model, images) == labels).mean())


def _batches(order: np.ndarray, batch_size: int):
    for i in range(0, len(order), batch_size):
        yield order[i : i + batch_size]


# ---------------------------------------------------------------------------
# teacher pretraining


def pretrain_teacher(
    spec: ModelSpec | str,
    dataset: DatasetHandle,
    epochs: int = 20,
    seed: int = 0,
    lr: float = 3e-3,
    batch_size: int = 64,
    recipe: DistillRecipe | None = None,
    history: list | None = None,
) -> Model:
    """Train a teacher with smoothed CE, then freeze its registry."""
    recipe = recipe or DistillRecipe()
    model = build_model(spec, seed=seed, source=Source.TEACHER, image_size=dataset.image_size,
                        num_classes=dataset.num_classes)
    params = model.params.trainable_items()
    opt = AdamW(params, lr=lr, betas=(recipe.beta1, recipe.beta2), eps=recipe.eps,
                weight_decay=recipe.weight_decay)
    train_x, train_y = dataset.split("train")
    steps_per_epoch = math.ceil(len(train_y) / batch_size)
    horizon = epochs * steps_per_epoch
    warmup = int(round(recipe.warmup_frac * horizon))
    step = 0
    for epoch in range(epochs):
        order = T.make_rng(seed, 0x7EAC, epoch).permutation(len(train_y))
        correct = 0
        for idx in _batches(order, batch_size):
            x = augment(train_x[idx], recipe.flip, recipe.crop, recipe.jitter,
                        seed=seed, epoch=epoch, indices=idx)
            logits = model(Tensor(x))
            loss = cross_entropy_smoothed(logits, train_y[idx], recipe.label_smoothing)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"teacher loss is {loss.item()} at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            clip_global_norm([p.grad for _, p in params], recipe.grad_clip)
            step += 1
            opt.step(lr_schedule(step, warmup, horizon, lr))
            correct += int((np.argmax(logits.data, 1) == train_y[idx]).sum())
        if history is not None:
            history.append(correct / len(train_y))
    return _freeze(model)


def _freeze(model: Model) -> Model:
    model.params.freeze()
    return model


# ---------------------------------------------------------------------------
# similarity


def _nearest_resize_rows(x: np.ndarray, n: int) -> np.ndarray:
    src = np.minimum(((np.arange(n) + 0.5) * x.shape[1] / n).astype(int), x.shape[1] - 1)
    return x[:, src]


def _as_token_matrix(f: StageFeature) -> np.ndarray:
    d = f.tensor.data
    if f.layout is Layout.GRID:
        b, c, h, w = d.shape
        d = d.transpose(0, 2, 3, 1).reshape(b, h * w, c)
    return d.reshape(d.shape[0], -1)


def cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.dot(a, b) / (na * nb))


def pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.dot(a, b) / (na * nb))


def batch_similarity(t: np.ndarray, s: np.ndarray) -> tuple[float | None, float | None]:
    """Mean per-sample cosine and Pearson over rows; samples with undefined values are skipped."""
    if t.shape[1] != s.shape[1]:
        n = min(t.shape[1], s.shape[1])
        t = _nearest_resize_rows(t, n) if t.shape[1] != n else t
        s = _nearest_resize_rows(s, n) if s.shape[1] != n else s
    cos = [c for c in (cosine(a, b) for a, b in zip(t, s)) if c is not None]
    pr = [p for p in (pearson(a, b) for a, b in zip(t, s)) if p is not None]
    return (float(np.mean(cos)) if cos else None, float(np.mean(pr)) if pr else None)


@dataclass
class StageSimilarity:
    cos_raw: float | None
    pearson_raw: float | None
    cos_uhkd: float | None
    pearson_uhkd: float | None


def similarity_probe(teacher_taps, student_taps, pairs=None) -> dict[int, StageSimilarity]:
    """Per-stage (cosine, Pearson) before (raw spatial) and after (FTM vs FAM) alignment.

    ``pairs`` maps stage -> (FtmOutput, FamOutput); stages without a pair get
    only the raw arm.
    """
    out = {}
    pairs = pairs or {}
    for tf, sf in zip(teacher_taps, student_taps):
        cr, pr = batch_similarity(_as_token_matrix(tf), _as_token_matrix(sf))
        cu = pu = None
        if tf.stage in pairs:
            t_out, s_out = pairs[tf.stage]
            td = t_out.tensor.data.reshape(t_out.shape[0], -1)
            sd = s_out.tensor.data.reshape(s_out.shape[0], -1)
            cu, pu = batch_similarity(td, sd)
        out[tf.stage] = StageSimilarity(cr, pr, cu, pu)
    return out


# ---------------------------------------------------------------------------
# distillation


@dataclass
class RunReport:
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    epoch_losses: list[LossBreakdown] = field(default_factory=list)
    losses: list[LossBreakdown] = field(default_factory=list)
    similarity: list[dict[int, StageSimilarity]] = field(default_factory=list)
    metrics_rows: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint_digest: str = ""
    teacher_digest_before: str = ""
    teacher_digest_after: str = ""

    @property
    def final_val_acc(self) -> float:
        return self.val_acc[-1] if self.val_acc else float("nan")

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=METRICS_HEADER, lineterminator="\n")
        w.writeheader()
        for row in self.metrics_rows:
            w.writerow({k: _fmt_cell(row.get(k)) for k in METRICS_HEADER})
        return buf.getvalue()


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


class Aligner:
    """Per-stage FTM config + student-side alignment chosen by the recipe."""

    def __init__(self, recipe: DistillRecipe, teacher_taps, student_taps, rng):
        self.recipe = recipe
        self.mode = recipe.align_mode
        use_fft = not recipe.no_fft
        self.ftm_cfg = FtmConfig(
            sigma_low=recipe.sigma_low,
            sigma_high=recipe.sigma_high,
            high_weight=recipe.high_weight,
            pool_factor=1 if recipe.no_downsample else recipe.pool_factor,
            use_filter=not recipe.no_filter,
            use_fft=use_fft,
        )
        self.fams: dict[int, FamParams] = {}
        self.targets: dict[int, tuple] = {}
        tt = {f.stage: f for f in teacher_taps}
        st = {f.stage: f for f in student_taps}
        for stage in sorted(recipe.stages):
            tf, sf = tt[stage], st[stage]
            _, n_t, c_t = ftm_output_shape(tf.tensor.shape, tf.layout, self.ftm_cfg)
            grid = None
            if tf.layout is Layout.GRID and sf.layout is Layout.GRID:
                grid = teacher_grid(tf.tensor.shape, self.ftm_cfg)
            self.targets[stage] = (n_t, c_t, grid)
            if self.mode in ("learned", "random_init"):
                n_s = student_spectral_tokens(sf.tensor.shape, sf.layout, use_fft)
                p = fam_init(sf.channels, c_t, n_s, n_t, sf.layout, rng)
                p.use_fft = use_fft
                if self.mode == "random_init":
                    p.freeze()
                self.fams[stage] = p

    def interp_mode(self, stage: int) -> str:
        # bilinear falls back to linear when the target is a token sequence
        grid = self.targets[stage][2]
        if self.mode == "bilinear" and grid is None:
            return "linear"
        if self.mode == "linear" and grid is not None:
            return "bilinear"
        return self.mode

    def align(self, sf: StageFeature):
        if self.mode in ("learned", "random_init"):
            return fam_forward(sf, self.fams[sf.stage])
        n_t, c_t, grid = self.targets[sf.stage]
        mode = self.interp_mode(sf.stage)
        return interp_align(sf, mode, n_t, c_t, grid if mode != "linear" else None)

    @property
    def target_key(self) -> tuple:
        return (self.ftm_cfg, self.recipe.teacher_standardize)

    def target(self, tf: StageFeature):
        out = ftm_forward(tf, self.ftm_cfg)
        return standardize_target(out) if self.recipe.teacher_standardize else out

    def pairs(self, teacher_taps, student_taps, targets: dict | None = None) -> dict:
        """stage -> (FtmOutput, aligned student output); ``targets`` may supply precomputed FTM outputs."""
        out = {}
        for i, sf in enumerate(student_taps):
            if sf.stage in self.recipe.stages:
                t = targets[sf.stage] if targets is not None else self.target(teacher_taps[i])
                out[sf.stage] = (t, self.align(sf))
        return out

    def trainable(self) -> list[tuple[str, Tensor]]:
        out = []
        for stage, p in sorted(self.fams.items()):
            if p.trainable:
                out.extend((f"fam.stage{stage}.{k}", v) for k, v in p.named_tensors().items())
        return out

    def load_state(self, entries) -> None:
        for stage, p in self.fams.items():
            for k, v in p.named_tensors().items():
                key = f"fam.stage{stage}.{k}"
                if key not in entries:
                    raise checkpoint.CheckpointError(f"checkpoint lacks {key}")
                if entries[key].shape != v.shape:
                    raise checkpoint.CheckpointError(f"{key}: shape {entries[key].shape} != {v.shape}")
                v.data = np.array(entries[key], dtype=np.float64)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for stage, p in sorted(self.fams.items()):
            for k, v in p.named_tensors().items():
                out[f"fam.stage{stage}.{k}"] = v.data.copy()
        return out


class TeacherCache:
    """Memo of augmented batches, teacher logits and FTM targets.

    Batch order and augmentation are keyed by (seed, epoch, index), so runs
    that share a teacher and a seed see identical teacher-side tensors. Arms
    of an ablation reuse them instead of recomputing. Call :meth:`clear`
    between seeds to bound memory.
    """

    def __init__(self):
        self._entries: dict = {}

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key):
        return self._entries.get(key)

    def put(self, key, entry) -> None:
        self._entries[key] = entry

    def clear(self) -> None:
        self._entries.clear()


def distill(
    teacher: Model,
    student: Model,
    recipe: DistillRecipe,
    dataset: DatasetHandle,
    out_dir=None,
    probe_size: int = 64,
    student_name: str = "",
    cache: TeacherCache | None = None,
) -> RunReport:
    """Train ``student`` against the frozen ``teacher`` with the joint objective."""
    recipe.validate()
    t0 = time.perf_counter()
    teacher.params.freeze()
    report = RunReport(teacher_digest_before=teacher.params.digest())
    train_x, train_y = dataset.split("train")
    val_x, val_y = dataset.split("val")
    probe_x = Tensor(val_x[:probe_size] if len(val_y) else train_x[:probe_size])
    use_features = recipe.lambda_mse > 0

    with T.no_grad():
        _, t_taps = teacher.forward_with_taps(Tensor(train_x[:2]))
        _, s_taps = student.forward_with_taps(Tensor(train_x[:2]))
    aligner = Aligner(recipe, t_taps, s_taps, T.make_rng(recipe.seed, 0xFA3))
    # cache entries are only valid for this teacher on this training split
    teacher_id = (report.teacher_digest_before, hashlib.sha256(train_x.tobytes()).hexdigest())
    with T.no_grad():
        _, probe_taps = teacher.forward_with_taps(probe_x)  # frozen teacher: probe once
    probe_targets = {f.stage: aligner.target(f) for f in probe_taps if f.stage in recipe.stages} if use_features else None

    params = student.params.trainable_items()
    if use_features:
        params = params + aligner.trainable()
    opt = AdamW(params, lr=recipe.lr, betas=(recipe.beta1, recipe.beta2), eps=recipe.eps,
                weight_decay=recipe.weight_decay)
    steps_per_epoch = math.ceil(len(train_y) / recipe.batch_size)
    horizon = recipe.epochs * steps_per_epoch
    warmup = int(round(recipe.warmup_frac * horizon))
    out_dir = Path(out_dir) if out_dir else None
    last_good = None

    step = 0
    for epoch in range(1, recipe.epochs + 1):
        order = T.make_rng(recipe.seed, 0x0DE, epoch).permutation(len(train_y))
        correct = 0
        sums = {"mse": 0.0, "kl": 0.0, "ce": 0.0, "total": 0.0}
        stage_sums = {s: 0.0 for s in recipe.stages}
        n_batches = 0
        for bi, idx in enumerate(_batches(order, recipe.batch_size)):
            x, z_t, targets = _teacher_side(teacher, aligner, recipe, train_x, idx, epoch, bi, cache,
                                            teacher_id, use_features)
            try:
                z_s, s_taps = student.forward_with_taps(x)
                pairs = list(aligner.pairs(None, s_taps, targets).values()) if use_features else []
                total, br = total_loss(pairs, z_t, z_s, train_y[idx], recipe.lambda_kl,
                                       recipe.lambda_ce, recipe.tau, recipe.label_smoothing)
            except NonFiniteError as exc:
                raise _diverged(f"{exc} at epoch {epoch}, step {step}", last_good) from None
            if not math.isfinite(br.total):
                raise _diverged(f"loss is {br.total} at epoch {epoch}, step {step}", last_good)
            opt.zero_grad()
            total.backward()
            for name, p in params:
                if p.grad is None:
                    p.grad = Tensor._wrap(np.zeros_like(p.data))
            clip_global_norm([p.grad for _, p in params], recipe.grad_clip)
            step += 1
            try:
                opt.step(lr_schedule(step, warmup, horizon, recipe.lr))
            except NonFiniteError as exc:
                raise _diverged(str(exc), last_good) from None
            report.losses.append(br)
            correct += int((np.argmax(z_s.data, 1) == train_y[idx]).sum())
            for k in sums:
                sums[k] += getattr(br, k)
            for s, v in br.per_stage_mse.items():
                stage_sums[s] += v
            n_batches += 1

        train_acc = correct / len(train_y)
        val_acc = accuracy(student, val_x, val_y)
        report.train_acc.append(train_acc)
        report.val_acc.append(val_acc)
        mean = {k: v / n_batches for k, v in sums.items()}
        report.epoch_losses.append(
            LossBreakdown(mean["mse"], mean["kl"], mean["ce"], mean["total"], recipe.lambda_kl,
                          recipe.lambda_ce, recipe.tau,
                          {s: v / n_batches for s, v in stage_sums.items()} if use_features else {})
        )
        sims = _probe(probe_taps, probe_targets, student, aligner, probe_x)
        report.similarity.append(sims)
        report.metrics_rows.extend(_epoch_rows(epoch, train_acc, val_acc, mean, stage_sums, n_batches,
                                               sims, use_features))
        if out_dir and recipe.checkpoint_every and epoch % recipe.checkpoint_every == 0:
            last_good = out_dir / f"student_epoch{epoch}.ckpt"
            _save_student(last_good, student, aligner, recipe, student_name)

    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        report.checkpoint_digest = _save_student(out_dir / "student.ckpt", student, aligner, recipe,
                                                 student_name)
        (out_dir / "metrics.csv").write_text(report.metrics_csv())
    else:
        report.checkpoint_digest = hashlib.sha256(
            checkpoint.encode(_student_entries(student, aligner))
        ).hexdigest()
    report.teacher_digest_after = teacher.params.digest()
    report.wall_clock = time.perf_counter() - t0
    return report


def _diverged(msg: str, last_good) -> TrainingDiverged:
    if last_good:
        log.error("training diverged; last good checkpoint kept at %s", last_good)
        msg += f" (last good checkpoint: {last_good})"
    return TrainingDiverged(msg)


def _teacher_side(teacher, aligner, recipe, train_x, idx, epoch, bi, cache, teacher_id, use_features):
    """Augmented batch, teacher logits and per-stage FTM targets, memoised when ``cache`` is given."""
    key = (teacher_id, recipe.seed, recipe.batch_size, recipe.flip, recipe.crop, recipe.jitter, epoch, bi)
    entry = cache.get(key) if cache is not None else None
    t_taps = None
    if entry is None:
        xd = augment(train_x[idx], recipe.flip, recipe.crop, recipe.jitter,
                     seed=recipe.seed, epoch=epoch, indices=idx)
        with T.no_grad():
            z_t, t_taps = teacher.forward_with_taps(Tensor(xd))
        entry = {"x": xd, "z_t": z_t, "targets": {}}
        if cache is not None:
            cache.put(key, entry)
    x = Tensor(entry["x"])
    if not use_features:
        return x, entry["z_t"], None
    tk = aligner.target_key
    store = entry["targets"]
    if any((tk, s) not in store for s in recipe.stages):
        if t_taps is None:
            with T.no_grad():
                _, t_taps = teacher.forward_with_taps(x)
        for f in t_taps:
            if f.stage in recipe.stages and (tk, f.stage) not in store:
                store[(tk, f.stage)] = aligner.target(f)
    return x, entry["z_t"], {s: store[(tk, s)] for s in recipe.stages}


def _probe(t_taps, targets, student, aligner: Aligner, probe_x: Tensor):
    with T.no_grad():
        _, s_taps = student.forward_with_taps(probe_x)
        pairs = aligner.pairs(t_taps, s_taps, targets) if targets is not None else {}
    return similarity_probe(t_taps, s_taps, pairs)


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _epoch_rows(epoch, train_acc, val_acc, mean, stage_sums, n_batches, sims, use_features):
    rows = [dict(epoch=epoch, split="train", acc=train_acc, stage=0, **mean)]
    if use_features:
        for s in sorted(stage_sums):
            rows.append(dict(epoch=epoch, split="train", stage=s, mse=stage_sums[s] / n_batches))
    rows.append(
        dict(
            epoch=epoch,
            split="val",
            acc=val_acc,
            stage=0,
            cos_raw=_mean_defined(v.cos_raw for v in sims.values()),
            cos_uhkd=_mean_defined(v.cos_uhkd for v in sims.values()),
            pearson_raw=_mean_defined(v.pearson_raw for v in sims.values()),
            pearson_uhkd=_mean_defined(v.pearson_uhkd for v in sims.values()),
        )
    )
    for s in sorted(sims):
        v = sims[s]
        rows.append(dict(epoch=epoch, split="val", stage=s, cos_raw=v.cos_raw, cos_uhkd=v.cos_uhkd,
                         pearson_raw=v.pearson_raw, pearson_uhkd=v.pearson_uhkd))
    return rows


def _student_entries(student: Model, aligner: Aligner) -> dict:
    entries = {f"student.{k}": v for k, v in student.params.state().items()}
    entries.update(aligner.state())
    return entries


def _save_student(path, student: Model, aligner: Aligner, recipe: DistillRecipe, name: str) -> str:
    meta = {
        "kind": "student",
        "preset": name,
        "spec": _spec_dict(student.spec),
        "recipe": dataclasses.asdict(recipe),
    }
    return checkpoint.save(path, _student_entries(student, aligner), meta)


def _spec_dict(spec: ModelSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["stage_widths"] = list(spec.stage_widths)
    return d


def spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    d["stage_widths"] = tuple(d["stage_widths"])
    return ModelSpec(**d)


def save_model(path, model: Model, prefix: str, meta: dict | None = None) -> str:
    entries = {f"{prefix}.{k}": v for k, v in model.params.state().items()}
    meta = dict(meta or {})
    meta.setdefault("kind", prefix)
    meta["spec"] = _spec_dict(model.spec)
    return checkpoint.save(path, entries, meta)


def load_model(path, prefix: str | None = None, source: Source = Source.STUDENT) -> Model:
    entries, meta = checkpoint.load(path)
    if "spec" not in meta:
        raise checkpoint.CheckpointError(f"{path}: sidecar with model spec is missing")
    prefix = prefix or meta.get("kind", "student")
    model = build_model(spec_from_dict(meta["spec"]), seed=0, source=source)
    lead = prefix + "."
    model.params.load_state({k[len(lead):]: v for k, v in entries.items() if k.startswith(lead)})
    if source is Source.TEACHER:
        model.params.freeze()
    return model


# ---------------------------------------------------------------------------
# ablations

ABLATION_ARMS: dict[str, dict] = {
    "full": {},
    "no_fft": {"no_fft": True},
    "no_filter": {"no_filter": True},
    "no_downsample": {"no_downsample": True},
    "bilinear": {"align_mode": "bilinear"},
    "nearest": {"align_mode": "nearest"},
    "linear": {"align_mode": "linear"},
    "random_init": {"align_mode": "random_init"},
    "ce_only": {"lambda_kl": 0.0, "lambda_ce": 1.0},
    "kd_only": {"lambda_kl": 0.7, "lambda_ce": 0.3},
}

STAGE_SUBSETS: tuple[tuple[int, ...], ...] = (
    (1,), (2,), (3,), (4,), (1, 2), (2, 3), (3, 4), (1, 2, 3), (2, 3, 4),
)


def ablation_arms(stage_subsets=STAGE_SUBSETS, base_arms=tuple(ABLATION_ARMS)) -> dict[str, dict]:
    arms = {name: ABLATION_ARMS[name] for name in base_arms}
    for subset in stage_subsets:
        arms["stages_" + "".join(map(str, subset))] = {"stages": tuple(subset)}
    return arms


ABLATION_HEADER = ("arm", "seed", "teacher", "student", "val_acc", "train_acc", "cos_raw", "cos_uhkd", "status")


def run_ablation_suite(
    base_recipe: DistillRecipe,
    dataset: DatasetHandle,
    teacher: Model,
    student_spec,
    seeds=(0,),
    arms: dict[str, dict] | None = None,
    out_csv=None,
    teacher_name: str = "",
    student_name: str = "",
    cache: TeacherCache | None = None,
) -> list[dict]:
    """Run every arm for every seed; a failing arm is recorded and the suite continues.

    Seeds form the outer loop so all arms of one seed share the teacher cache,
    which is cleared before the next seed. Rows come back arm-major.
    """
    arms = arms if arms is not None else ablation_arms()
    cache = cache if cache is not None else TeacherCache()
    rows = []
    for seed in seeds:
        cache.clear()
        for name, changes in arms.items():
            row = {"arm": name, "seed": seed, "teacher": teacher_name, "student": student_name}
            try:
                recipe = recipe_with(base_recipe, seed=seed, **changes)
                student = build_model(student_spec, seed=seed, image_size=dataset.image_size,
                                      num_classes=dataset.num_classes)
                rep = distill(teacher, student, recipe, dataset, cache=cache)
                last = rep.similarity[-1]
                row.update(
                    val_acc=rep.final_val_acc,
                    train_acc=rep.train_acc[-1],
                    cos_raw=_mean_defined(v.cos_raw for v in last.values()),
                    cos_uhkd=_mean_defined(v.cos_uhkd for v in last.values()),
                    status="ok",
                )
            except Exception as exc:  # noqa: BLE001 - arms are isolated by design
                log.exception("arm %s (seed %s) failed", name, seed)
                row.update(status=f"failed: {type(exc).__name__}: {exc}")
            rows.append(row)
    cache.clear()
    order = {name: i for i, name in enumerate(arms)}
    rows.sort(key=lambda r: (order[r["arm"]], list(seeds).index(r["seed"])))
    if out_csv:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_HEADER, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt_cell(r.get(k)) for k in ABLATION_HEADER})
    return rows
