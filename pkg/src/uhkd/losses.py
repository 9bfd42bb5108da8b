"""Frequency-domain MSE, temperature-scaled KL, smoothed CE and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .fam import FamOutput
from .ftm import FtmOutput
from .tensor import ShapeError, Tensor


@dataclass
class LossBreakdown:
    mse: float
    kl: float
    ce: float
    total: float
    lambda_kl: float
    lambda_ce: float
    tau: float
    per_stage_mse: dict[int, float] = field(default_factory=dict)

    @property
    def lambda_mse(self) -> float:
        return 1.0 - self.lambda_kl - self.lambda_ce


def freq_mse(t: FtmOutput | Tensor, s: FamOutput | Tensor) -> Tensor:
    """Mean squared difference; the teacher side is detached."""
    tt = t.tensor if isinstance(t, FtmOutput) else t
    st = s.tensor if isinstance(s, FamOutput) else s
    if tt.shape != st.shape:
        raise ShapeError(f"teacher {tt.shape} and student {st.shape} differ")
    diff = st - tt.detach()
    return T.reduce("mean", T.elementwise("square", diff))


def kd_kl(z_t: Tensor, z_s: Tensor, tau: float = 4.0) -> Tensor:
    """tau^2 * batch-mean KL(softmax(z_t/tau) || softmax(z_s/tau))."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if z_t.shape != z_s.shape or z_s.ndim != 2 or z_s.shape[1] < 2:
        raise ShapeError(f"logits must both be (B, K>=2), got {z_t.shape} and {z_s.shape}")
    with T.no_grad():
        log_p_t = T.log_softmax(Tensor(z_t.data) / tau, axis=1).data
    p_t = np.exp(log_p_t)
    log_q = T.log_softmax(z_s / tau, axis=1)
    # sum p_t * (log p_t - log q); the entropy part is a constant w.r.t. the student
    cross = T.reduce("sum", log_q * Tensor(p_t), 1)
    per_sample = Tensor((p_t * log_p_t).sum(axis=1)) - cross
    return T.reduce("mean", per_sample) * (tau * tau)


def cross_entropy_smoothed(z_s: Tensor, labels: Sequence[int], smoothing: float = 0.1) -> Tensor:
    """CE against (1-eps) on the true class and eps/(K-1) on every other class."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = z_s.shape
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got {labels.shape}")
    if (labels < 0).any() or (labels >= k).any():
        raise ValueError(f"labels must lie in [0, {k})")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    target = np.full((b, k), smoothing / (k - 1))
    target[np.arange(b), labels] = 1.0 - smoothing
    logp = T.log_softmax(z_s, axis=1)
    return -T.reduce("mean", T.reduce("sum", logp * Tensor(target), 1))


def combine(mse: Tensor, kl: Tensor, ce: Tensor, lambda_kl: float, lambda_ce: float) -> Tensor:
    if not (0.0 <= lambda_kl and 0.0 <= lambda_ce and lambda_kl + lambda_ce <= 1.0 + 1e-12):
        raise ValueError(f"need 0 <= lambda_kl + lambda_ce <= 1, got {lambda_kl} + {lambda_ce}")
    w_mse = 1.0 - lambda_kl - lambda_ce
    return mse * w_mse + kl * lambda_kl + ce * lambda_ce


def total_loss(
    pairs: Sequence[tuple[FtmOutput, FamOutput]],
    z_t: Tensor,
    z_s: Tensor,
    labels: Sequence[int],
    lambda_kl: float = 0.4,
    lambda_ce: float = 0.3,
    tau: float = 4.0,
    smoothing: float = 0.1,
) -> tuple[Tensor, LossBreakdown]:
    """Joint objective; stage MSEs are averaged so the weights ignore branch count."""
    if lambda_kl < 0 or lambda_ce < 0 or lambda_kl + lambda_ce > 1.0 + 1e-12:
        raise ValueError(f"need 0 <= lambda_kl + lambda_ce <= 1, got {lambda_kl} + {lambda_ce}")
    stage_terms = {}
    for t_out, s_out in pairs:
        if t_out.stage != s_out.stage:
            raise ValueError(f"stage mismatch {t_out.stage} vs {s_out.stage}")
        stage_terms[t_out.stage] = freq_mse(t_out, s_out)
    if stage_terms:
        mse = stage_terms[next(iter(stage_terms))]
        for k in list(stage_terms)[1:]:
            mse = mse + stage_terms[k]
        mse = mse / len(stage_terms)
    else:
        mse = Tensor(0.0)
    kl = kd_kl(z_t, z_s, tau)
    ce = cross_entropy_smoothed(z_s, labels, smoothing)
    total = combine(mse, kl, ce, lambda_kl, lambda_ce)
    report = LossBreakdown(
        mse=mse.item(),
        kl=kl.item(),
        ce=ce.item(),
        total=total.item(),
        lambda_kl=lambda_kl,
        lambda_ce=lambda_ce,
        tau=tau,
        per_stage_mse={k: v.item() for k, v in stage_terms.items()},
    )
    return total, report
