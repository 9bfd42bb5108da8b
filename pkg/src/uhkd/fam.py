"""Student-side feature alignment: FFT -> |.| -> channel map -> token map -> norm.

Everything here stays on the autodiff tape so the adapter and the student
backbone train together against the teacher's FTM output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import spectral
from . import tensor as T
from .features import Layout, Source, StageFeature
from .tensor import ShapeError, Tensor

NORM_EPS = 1e-5


@dataclass(frozen=True)
class FamOutput:
    tensor: Tensor
    stage: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


@dataclass
class FamParams:
    """Adapter weights for one distillation stage.

    ``channel_w`` is (C^S, C^T) for the SEQ Linear_C and (C^T, C^S) for the
    GRID 1x1 convolution; ``seq_w`` is (N^S, N^T).
    """

    layout: Layout
    channel_w: Tensor
    channel_b: Tensor
    seq_w: Tensor
    seq_b: Tensor
    gamma: Tensor
    beta: Tensor
    trainable: bool = True
    use_fft: bool = True
    _names: tuple = field(default=("channel_w", "channel_b", "seq_w", "seq_b", "gamma", "beta"), repr=False)

    @property
    def in_channels(self) -> int:
        return self.channel_w.shape[0 if self.layout is Layout.SEQ else 1]

    @property
    def out_channels(self) -> int:
        return self.channel_w.shape[1 if self.layout is Layout.SEQ else 0]

    @property
    def in_tokens(self) -> int:
        return self.seq_w.shape[0]

    @property
    def out_tokens(self) -> int:
        return self.seq_w.shape[1]

    def named_tensors(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in self._names}

    def freeze(self) -> FamParams:
        """Mark as non-trainable (the random-init baseline)."""
        self.trainable = False
        for t in self.named_tensors().values():
            t.requires_grad = False
            t.grad = None
        return self


def fam_init(c_s: int, c_t: int, n_s: int, n_t: int, layout: Layout, rng: np.random.Generator) -> FamParams:
    """Fan-in scaled uniform weights, zero biases, identity affine."""
    for v in (c_s, c_t, n_s, n_t):
        if v <= 0:
            raise ValueError(f"extents must be positive, got {(c_s, c_t, n_s, n_t)}")
    layout = Layout(layout)
    bc = 1.0 / math.sqrt(c_s)
    bn = 1.0 / math.sqrt(n_s)
    cw_shape = (c_s, c_t) if layout is Layout.SEQ else (c_t, c_s)
    return FamParams(
        layout=layout,
        channel_w=Tensor(rng.uniform(-bc, bc, cw_shape), requires_grad=True),
        channel_b=Tensor(np.zeros(c_t), requires_grad=True),
        seq_w=Tensor(rng.uniform(-bn, bn, (n_s, n_t)), requires_grad=True),
        seq_b=Tensor(np.zeros(n_t), requires_grad=True),
        gamma=Tensor(np.ones(c_t), requires_grad=True),
        beta=Tensor(np.zeros(c_t), requires_grad=True),
    )


def student_spectral_tokens(feature_shape: tuple[int, ...], layout: Layout, use_fft: bool = True) -> int:
    """N^S seen by Linear_N, after the power-of-two padding of the FFT."""
    layout = Layout(layout)
    if layout is Layout.SEQ:
        n = feature_shape[1]
        return spectral.next_pow2(n) if use_fft else n
    h, w = feature_shape[2], feature_shape[3]
    if use_fft:
        h, w = spectral.next_pow2(h), spectral.next_pow2(w)
    return h * w


def student_magnitude(f: StageFeature, use_fft: bool = True) -> Tensor:
    """Centred magnitude spectrum of a student feature (input itself when use_fft is off)."""
    if not use_fft:
        return f.tensor
    spec = spectral.center_shift(spectral.fft_forward(f.tensor, f.layout))
    return spectral.magnitude(spec)


def _standardize(x: Tensor) -> Tensor:
    return T.layer_norm(x, eps=NORM_EPS)


def fam_forward(f: StageFeature, p: FamParams) -> FamOutput:
    if f.source is not Source.STUDENT:
        raise ValueError("FAM only accepts student features")
    if f.layout is not p.layout:
        raise ShapeError(f"feature layout {f.layout.value} != adapter layout {p.layout.value}")
    if f.channels != p.in_channels:
        raise ShapeError(f"feature has {f.channels} channels, adapter expects {p.in_channels}")
    mag = student_magnitude(f, p.use_fft)

    if f.layout is Layout.SEQ:
        x = T.matmul(mag, p.channel_w) + p.channel_b  # Linear_C
    else:
        # 1x1 conv == per-position channel matmul; flattening first is equivalent
        x = T.matmul(T.grid_to_seq(mag), T.transpose(p.channel_w, 0, 1)) + p.channel_b
    if x.shape[1] != p.in_tokens:
        raise ShapeError(f"feature yields {x.shape[1]} tokens, adapter expects {p.in_tokens}")

    # Linear_N along tokens: (B, N^S, C) -> (B, C, N^S) -> (B, C, N^T) -> (B, N^T, C)
    x = T.transpose(x, 1, 2)
    x = T.matmul(x, p.seq_w) + p.seq_b
    x = T.transpose(x, 1, 2)

    y = T.layer_norm(x, p.gamma, p.beta, eps=NORM_EPS)
    return FamOutput(y, f.stage)


def fam_forward_frozen(f: StageFeature, p: FamParams) -> FamOutput:
    """Same computation with the adapter excluded from training."""
    if p.trainable:
        p.freeze()
    return fam_forward(f, p)


# ---------------------------------------------------------------------------
# non-parametric alignment (interpolation baselines)


def _linear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # align-corners linear interpolation, rows are output positions
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def _nearest_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel nearest: integer upsampling duplicates each source value
    src = np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), src] = 1.0
    return m


def channel_resolve_matrix(c_s: int, c_t: int) -> np.ndarray:
    """(C^S, C^T) map: cyclic replication when growing, group means when shrinking."""
    m = np.zeros((c_s, c_t))
    if c_s <= c_t:
        m[np.arange(c_t) % c_s, np.arange(c_t)] = 1.0
    else:
        for j, grp in enumerate(np.array_split(np.arange(c_s), c_t)):
            m[grp, j] = 1.0 / len(grp)
    return m


def resize_matrix(mode: str, n_in: int, n_out: int) -> np.ndarray:
    if mode in ("linear", "bilinear"):
        return _linear_matrix(n_in, n_out)
    if mode == "nearest":
        return _nearest_matrix(n_in, n_out)
    raise ValueError(f"unknown interpolation mode {mode!r}")


def interp_align(
    f: StageFeature,
    mode: str,
    n_t: int,
    c_t: int,
    target_grid: tuple[int, int] | None = None,
) -> FamOutput:
    """Resize the student's magnitude spectrum to (N^T, C^T) without parameters.

    With a GRID student and a grid-shaped target, ``bilinear``/``nearest``
    resample the (H, W) plane. Otherwise the flattened token sequence is
    resampled with ``linear``/``nearest``. Output is standardised per token.
    """
    if f.source is not Source.STUDENT:
        raise ValueError("interp_align only accepts student features")
    two_d = f.layout is Layout.GRID and target_grid is not None
    if mode == "bilinear" and not two_d:
        raise ValueError("bilinear needs a GRID student and a grid-shaped target")
    if mode == "linear" and two_d:
        raise ValueError("linear resamples token sequences; use bilinear for grid targets")
    if mode not in ("bilinear", "nearest", "linear"):
        raise ValueError(f"unknown interpolation mode {mode!r}")

    mag = student_magnitude(f)
    seq = T.grid_to_seq(mag) if f.layout is Layout.GRID else mag
    if two_d:
        th, tw = target_grid
        if th * tw != n_t:
            raise ShapeError(f"target grid {target_grid} does not hold {n_t} tokens")
        h, w = mag.shape[2], mag.shape[3]
        r = np.kron(resize_matrix(mode, h, th), resize_matrix(mode, w, tw))
    else:
        r = resize_matrix(mode, seq.shape[1], n_t)
    x = T.matmul(Tensor(r), seq)  # (N^T, N^S) @ (B, N^S, C)
    x = T.matmul(x, Tensor(channel_resolve_matrix(seq.shape[2], c_t)))
    return FamOutput(_standardize(x), f.stage)
