"""Teacher-side feature transformation: FFT -> |.| -> frequency filter -> pool -> flatten.

The module has no parameters and never records gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import spectral
from . import tensor as T
from .features import Layout, Source, StageFeature
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class FtmConfig:
    sigma_low: float = 0.5
    sigma_high: float = 0.5
    high_weight: float = 0.2
    pool_factor: int = 2
    use_filter: bool = True
    use_fft: bool = True  # False: spatial-domain ablation (pool + flatten only)


@dataclass(frozen=True)
class FtmOutput:
    tensor: Tensor
    stage: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


def _effective_factor(extents: tuple[int, ...], factor: int) -> int:
    # stages narrower than the pool window are left unpooled
    return factor if all(e % factor == 0 and e >= factor for e in extents) else 1


def ftm_output_shape(feature_shape: tuple[int, ...], layout: Layout, cfg: FtmConfig) -> tuple[int, int, int]:
    """(B, N^T, C^T) that ftm_forward produces for a feature of this shape."""
    layout = Layout(layout)
    if layout is Layout.SEQ:
        b, n, c = feature_shape
        ext = (spectral.next_pow2(n) if cfg.use_fft else n,)
    else:
        b, c, h, w = feature_shape
        ext = tuple(spectral.next_pow2(e) if cfg.use_fft else e for e in (h, w))
    f = _effective_factor(ext, cfg.pool_factor)
    tokens = 1
    for e in ext:
        tokens *= e // f
    return b, tokens, c


def teacher_grid(feature_shape: tuple[int, ...], cfg: FtmConfig) -> tuple[int, int]:
    """Pooled (H, W) of a GRID teacher feature."""
    _, _, h, w = feature_shape
    ext = tuple(spectral.next_pow2(e) if cfg.use_fft else e for e in (h, w))
    f = _effective_factor(ext, cfg.pool_factor)
    return ext[0] // f, ext[1] // f


def ftm_forward(f: StageFeature, cfg: FtmConfig = FtmConfig()) -> FtmOutput:
    if f.source is not Source.TEACHER:
        raise ValueError("FTM only accepts teacher features")
    layout = f.layout
    with T.no_grad():
        x = f.tensor.detach()
        if cfg.use_fft:
            spec = spectral.center_shift(spectral.fft_forward(x, layout))
            y = spectral.magnitude(spec)
            if cfg.use_filter:
                ext = tuple(y.shape[ax] for ax in layout.spectral_axes)
                mask = _cached_mask(ext, cfg.sigma_low, cfg.sigma_high, cfg.high_weight)
                y = spectral.apply_mask(y, mask, layout)
        else:
            y = x
        ext = tuple(y.shape[ax] for ax in layout.spectral_axes)
        y = spectral.avg_downsample(y, layout, _effective_factor(ext, cfg.pool_factor))
        if layout is Layout.GRID:
            y = T.grid_to_seq(y)
    if y.ndim != 3:
        raise ShapeError(f"FTM produced rank {y.ndim}")
    return FtmOutput(y, f.stage)


_MASKS: dict = {}


def _cached_mask(ext, sl, sh, hw) -> spectral.FrequencyMask:
    key = (ext, sl, sh, hw)
    m = _MASKS.get(key)
    if m is None:
        m = spectral.build_mask(ext, sl, sh, hw)
        _MASKS[key] = m
    return m


def parameter_count() -> int:
    """FTM owns no trainable tensors."""
    return 0


def standardize_target(out: FtmOutput, eps: float = 1e-5) -> FtmOutput:
    """Per-token channel standardisation of a teacher target (no affine).

    Puts the teacher on the same per-token statistics the student adapter
    produces, so the MSE compares spectral shape rather than raw energy.
    """
    with T.no_grad():
        return FtmOutput(T.layer_norm(out.tensor, eps=eps), out.stage)

