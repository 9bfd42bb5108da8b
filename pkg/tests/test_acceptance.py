"""Acceptance criteria 1-12.

Criteria 1-6 are property and oracle checks. Criteria 7-12 share one run of
the desk-scale suite (``uhkd.suite``), which takes about 16 minutes on a
single laptop core. Set ``UHKD_SUITE_JSON=path`` to reuse a stored run; the
file is written after a fresh run.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import grad_cases, gradcheck
from uhkd import spectral
from uhkd import tensor as T
from uhkd.config import DistillRecipe
from uhkd.engine import Aligner, distill
from uhkd.fam import FamOutput, FamParams, fam_forward
from uhkd.features import Layout, Source, StageFeature
from uhkd.ftm import FtmOutput
from uhkd.losses import combine, kd_kl, total_loss
from uhkd.models import PAIRINGS, build_model
from uhkd.suite import SuiteConfig, SuiteResult, interp_arms, run_suite
from uhkd.tensor import Tensor

EPS = 1e-12


# -- 1. FFT oracle --------------------------------------------------------


def test_criterion_01_fft_matches_naive_dft(record):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_abs, worst_parseval = 0.0, 0.0
    for p in range(1, 9):
        n = 2**p
        k = np.arange(n)
        dft = np.exp(-2j * np.pi * np.outer(k, k) / n)
        x = rng.normal(size=(100, n)) + 1j * rng.normal(size=(100, n))
        got = spectral.fft_last_axis(x)
        worst_abs = max(worst_abs, float(np.abs(got - x @ dft.T).max()))
        e_time = (np.abs(x) ** 2).sum(1)
        e_freq = (np.abs(got) ** 2).sum(1) / n
        worst_parseval = max(worst_parseval, float((np.abs(e_freq - e_time) / e_time).max()))
    elapsed = time.perf_counter() - start
    ok = worst_abs <= 1e-9 and worst_parseval <= 1e-9 and elapsed < 5.0
    record(1, ok, f"max |FFT - DFT| {worst_abs:.2e}, Parseval rel {worst_parseval:.2e}, {elapsed:.2f}s")
    assert ok


# -- 2. gradient suite ----------------------------------------------------


def _fam_loss_case(layout, s_shape, c_t, n_t):
    c_s = s_shape[2] if layout is Layout.SEQ else s_shape[1]
    n_s = s_shape[1] if layout is Layout.SEQ else s_shape[2] * s_shape[3]
    r = np.random.default_rng(sum(s_shape) + c_t)
    target = Tensor(r.normal(size=(s_shape[0], n_t, c_t)))
    z_t = Tensor(r.normal(size=(s_shape[0], 3)))
    labels = r.integers(0, 3, s_shape[0])
    cw_shape = (c_s, c_t) if layout is Layout.SEQ else (c_t, c_s)
    arrays = [
        r.normal(size=s_shape) + 0.3,
        r.uniform(-0.5, 0.5, cw_shape), r.normal(size=c_t) * 0.1,
        r.uniform(-0.5, 0.5, (n_s, n_t)), r.normal(size=n_t) * 0.1,
        r.uniform(0.5, 1.5, c_t), r.normal(size=c_t) * 0.1,
        r.normal(size=(s_shape[0], 3)),
    ]

    def build(x, cw, cb, sw, sb, g, b, z_s):
        p = FamParams(layout, cw, cb, sw, sb, g, b)
        s_out = fam_forward(StageFeature(x, layout, 1, Source.STUDENT), p)
        return total_loss([(FtmOutput(target, 1), s_out)], z_t, z_s, labels)[0]

    return build, arrays


FAM_CASES = [
    (Layout.SEQ, (2, 4, 3), 3, 2),
    (Layout.SEQ, (1, 8, 2), 4, 4),
    (Layout.GRID, (1, 2, 2, 4), 3, 4),
    (Layout.GRID, (2, 3, 2, 2), 2, 2),
]


def test_criterion_02_gradient_suite(record):
    start = time.perf_counter()
    failures, checked = [], 0
    for name, (build, factories) in sorted(grad_cases().items()):
        r = np.random.default_rng(7)
        if len(factories) < 3:
            failures.append(f"{name}: only {len(factories)} shapes")
        for make in factories:
            try:
                gradcheck(build, make(r))
                checked += 1
            except AssertionError as exc:
                failures.append(f"{name}: {exc}")
    for case in FAM_CASES:
        build, arrays = _fam_loss_case(*case)
        try:
            gradcheck(build, arrays)
            checked += 1
        except AssertionError as exc:
            failures.append(f"fam->total_loss {case}: {exc}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60.0
    record(2, ok, f"{checked} gradchecks over {len(grad_cases())} ops + FAM/loss path, {elapsed:.1f}s"
           + (f"; first failure {failures[0]}" if failures else ""))
    assert ok, failures


# -- 3. mask analytics ----------------------------------------------------


def test_criterion_03_mask_analytics(record):
    sigma = 0.37
    centre = spectral.low_band(0.0, sigma)
    at_sigma = spectral.low_band(sigma, sigma)
    monotone = True
    for ext in [(8,), (64,), (8, 8), (16, 32)]:
        m = spectral.build_mask(ext, sigma, 0.5, 0.0).values.data.ravel()
        d = spectral.normalized_distance(ext).ravel()
        order = np.argsort(d, kind="stable")
        monotone &= bool((np.diff(m[order]) <= 0).all())
        monotone &= m[np.argmin(d)] == 1.0
    ok = centre == 1.0 and abs(at_sigma - np.exp(-1)) <= 1e-12 and monotone
    record(3, ok, f"M(0)={centre}, |M(sigma)-1/e|={abs(at_sigma - np.exp(-1)):.1e}, monotone={monotone}")
    assert ok


# -- 4. shape contract ----------------------------------------------------


def test_criterion_04_shape_contract(record):
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)))
    combos, mismatches, checked = set(), [], 0
    for t_name, s_name in PAIRINGS:
        t = build_model(t_name, source=Source.TEACHER)
        s = build_model(s_name)
        with T.no_grad():
            _, tt = t.forward_with_taps(x)
            _, st = s.forward_with_taps(x)
            al = Aligner(DistillRecipe(), tt, st, T.make_rng(0, 1))
            for stage, (t_out, s_out) in al.pairs(tt, st).items():
                checked += 1
                combos.add((tt[stage - 1].layout.value, st[stage - 1].layout.value))
                if t_out.shape != s_out.shape:
                    mismatches.append((t_name, s_name, stage, t_out.shape, s_out.shape))
    ok = not mismatches and checked == 4 * len(PAIRINGS) == 32 and len(combos) == 4
    record(4, ok, f"{checked} stage pairs over {len(PAIRINGS)} pairings, layout combos {sorted(combos)}")
    assert ok, mismatches


# -- 5. loss algebra ------------------------------------------------------


def test_criterion_05_loss_algebra(record):
    r = np.random.default_rng(3)
    z = Tensor(r.normal(size=(4, 5)))
    z2 = Tensor(r.normal(size=(4, 5)))
    labels = [0, 1, 2, 3]
    pair = (FtmOutput(Tensor(r.normal(size=(4, 3, 2))), 1), FamOutput(Tensor(r.normal(size=(4, 3, 2))), 1))
    _, rep = total_loss([pair], z, z2, labels, 0.4, 0.3)
    w_mse = rep.lambda_mse
    kl_self = kd_kl(z, z, 4.0).item()
    m, k, c = Tensor(rep.mse), Tensor(rep.kl), Tensor(rep.ce)
    only_mse = combine(m, k, c, 0.0, 0.0).item()
    only_kl = combine(m, k, c, 1.0, 0.0).item()
    only_ce = combine(m, k, c, 0.0, 1.0).item()
    ok = (
        abs(w_mse - 0.3) <= EPS
        and abs(kl_self) <= EPS
        and abs(only_mse - rep.mse) <= EPS
        and abs(only_kl - rep.kl) <= EPS
        and abs(only_ce - rep.ce) <= EPS
        and abs(rep.total - (0.3 * rep.mse + 0.4 * rep.kl + 0.3 * rep.ce)) <= EPS
    )
    record(5, ok, f"MSE weight {w_mse:.12f}, KL(z,z)={kl_self:.1e}, degenerate weights exact")
    assert ok


# -- 6. reproducibility ---------------------------------------------------


def test_criterion_06_reproducibility(record, tmp_path):
    from uhkd.data import synth_dataset

    ds = synth_dataset(num_classes=4, n_per_class=10, size=16, seed=0, val_fraction=0.5)
    digests = []
    for run in ("a", "b"):
        t = build_model("attn_s", seed=1, image_size=16, num_classes=4, source=Source.TEACHER)
        t.params.freeze()
        s = build_model("cnn_xs", seed=2, image_size=16, num_classes=4)
        distill(t, s, DistillRecipe(epochs=3, batch_size=8, seed=5), ds, out_dir=tmp_path / run)
        digests.append(((tmp_path / run / "metrics.csv").read_bytes(), (tmp_path / run / "student.ckpt").read_bytes()))
    ok = digests[0] == digests[1]
    record(6, ok, "metrics.csv and student.ckpt byte-identical across two runs" if ok else "runs differ")
    assert ok


# -- 7-12. desk-scale experiments -----------------------------------------


@pytest.fixture(scope="module")
def suite() -> SuiteResult:
    path = os.environ.get("UHKD_SUITE_JSON")
    if path and Path(path).exists():
        return SuiteResult.from_json(Path(path).read_text())
    res = run_suite(SuiteConfig(), progress=print)
    if path:
        Path(path).write_text(res.to_json())
    return res


def _ge(a: float, b: float) -> bool:
    return a >= b - 1e-12


def test_criterion_07_distillation_beats_ce_only(record, suite):
    cfg = SuiteConfig()
    gains = {f"{t}->{s}": suite.mean_acc(t, s, "full") - suite.mean_acc(t, s, "ce_only") for t, s in cfg.distill_pairs}
    wins = sum(g >= 0.01 - 1e-12 for g in gains.values())
    ok = wins >= 3
    detail = ", ".join(f"{k} {100 * g:+.1f}pt" for k, g in gains.items())
    record(7, ok, f"{wins}/4 pairs gain >= 1.0pt ({detail}); suite {suite.seconds / 60:.1f} min")
    assert ok


def test_criterion_08_fft_and_filter_matter(record, suite):
    rows, wins = [], 0
    for t, s in SuiteConfig().ablation_pairs:
        full = suite.mean_acc(t, s, "full")
        nf, nfl = suite.mean_acc(t, s, "no_fft"), suite.mean_acc(t, s, "no_filter")
        win = _ge(full, nf) and _ge(full, nfl)
        wins += win
        rows.append(f"{t}->{s} full {full:.3f} no_fft {nf:.3f} no_filter {nfl:.3f}")
    ok = wins >= 2
    record(8, ok, f"{wins}/3 pairs; " + "; ".join(rows))
    assert ok


def test_criterion_09_downsampling_matters(record, suite):
    rows, wins = [], 0
    for t, s in SuiteConfig().ablation_pairs:
        full, nd = suite.mean_acc(t, s, "full"), suite.mean_acc(t, s, "no_downsample")
        wins += _ge(full, nd)
        rows.append(f"{t}->{s} full {full:.3f} no_downsample {nd:.3f}")
    ok = wins >= 2
    record(9, ok, f"{wins}/3 pairs; " + "; ".join(rows))
    assert ok


def test_criterion_10_learned_alignment_wins(record, suite):
    rows, wins = [], 0
    for t, s in SuiteConfig().ablation_pairs:
        full = suite.mean_acc(t, s, "full")
        others = {a: suite.mean_acc(t, s, a) for a in (*interp_arms(t, s), "random_init")}
        wins += all(_ge(full, v) for v in others.values())
        rows.append(f"{t}->{s} full {full:.3f} " + " ".join(f"{a} {v:.3f}" for a, v in others.items()))
    ok = wins >= 2
    record(10, ok, f"{wins}/3 pairs; " + "; ".join(rows))
    assert ok


def test_criterion_11_all_stages_beat_best_single(record, suite):
    t, s = SuiteConfig().stage_pair
    full = suite.mean_acc(t, s, "full")
    singles = {k: suite.mean_acc(t, s, f"stages_{k}") for k in (1, 2, 3, 4)}
    best = max(singles, key=singles.get)
    ok = _ge(full, singles[best])
    record(11, ok, f"{t}->{s} stages 1-4 {full:.3f} vs best single {{{best}}} {singles[best]:.3f}")
    assert ok


def test_criterion_12_alignment_raises_similarity(record, suite):
    cos = suite.stage_cosines("full")
    ok = all(ali > raw for raw, ali in cos.values())
    record(12, ok, "; ".join(f"stage {k} raw {raw:.3f} -> aligned {ali:.3f}" for k, (raw, ali) in cos.items()))
    assert ok
