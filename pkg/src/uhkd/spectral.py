"""FFT, magnitude spectra, centred Gaussian frequency masks and average pooling.

The FFT is an iterative radix-2 Cooley-Tukey transform vectorised over all
leading axes. Extents that are not powers of two are zero-padded up to the
next power of two before transforming; teacher and student go through the
same rule so their spectral extents agree.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .features import Layout
from .tensor import ShapeError, Tensor

MAG_FLOOR = 1e-12
SPEC_MAGIC = b"UHKDSPEC"
SPEC_VERSION = 1


# ---------------------------------------------------------------------------
# raw complex FFT on numpy arrays


def next_pow2(n: int) -> int:
    if n <= 0:
        raise ShapeError("zero-length axis")
    return 1 << (n - 1).bit_length()


def is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@functools.lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    rev.setflags(write=False)
    return rev


@functools.lru_cache(maxsize=None)
def _twiddles(n: int) -> tuple[np.ndarray, ...]:
    # one table per butterfly stage: exp(-2*pi*i*k/(2m)), k < m
    tables = []
    m = 1
    while m < n:
        w = np.exp(-2j * np.pi * np.arange(m) / (2 * m))
        w.setflags(write=False)
        tables.append(w)
        m *= 2
    return tuple(tables)


def fft_last_axis(z: np.ndarray) -> np.ndarray:
    """Unnormalised forward DFT along the last axis (power-of-two length)."""
    n = z.shape[-1]
    if n == 0:
        raise ShapeError("zero-length axis")
    if not is_pow2(n):
        raise ShapeError(f"radix-2 FFT needs a power-of-two length, got {n}")
    lead = z.shape[:-1]
    a = np.asarray(z, dtype=np.complex128)[..., _bit_reverse(n)]
    m = 1
    for w in _twiddles(n):
        a = a.reshape(*lead, n // (2 * m), 2, m)
        even = a[..., 0, :]
        odd = a[..., 1, :] * w
        a = np.stack((even + odd, even - odd), axis=-2)
        m *= 2
    return a.reshape(*lead, n)


def fft_axes(z: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    out = np.asarray(z, dtype=np.complex128)
    for ax in axes:
        out = np.moveaxis(fft_last_axis(np.moveaxis(out, ax, -1)), -1, ax)
    return out


def _conj_transform(z: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    # conj(F) z == conj(F conj(z)); the adjoint of the (symmetric) DFT matrix
    return np.conj(fft_axes(np.conj(z), axes))


# ---------------------------------------------------------------------------
# differentiable spectrum


@dataclass(frozen=True)
class Spectrum:
    real: Tensor
    imag: Tensor
    centered: bool
    axes: tuple[int, ...]

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"real {self.real.shape} and imag {self.imag.shape} differ")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real.shape

    def complex(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


def pad_to_pow2(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    widths = [(0, 0)] * x.ndim
    changed = False
    for ax in axes:
        n = x.shape[ax]
        p = next_pow2(n)
        if p != n:
            widths[ax] = (0, p - n)
            changed = True
    return T.pad(x, widths) if changed else x


def _dft(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    # returns stacked (2, ...) = (real, imag); backward is the conjugate transform
    z = fft_axes(x.data, axes)
    out = np.stack((z.real, z.imag))

    def _bw(g):
        return (_conj_transform(g[0] + 1j * g[1], axes).real,)

    return T.record(out, (x,), _bw, "fft")


def fft_forward(x: Tensor, layout: Layout) -> Spectrum:
    """FFT over the token axis (SEQ) or over (H, W) (GRID), per channel."""
    layout = Layout(layout)
    if x.ndim != layout.rank:
        raise ShapeError(f"{layout.value} input must be rank {layout.rank}, got {x.shape}")
    axes = layout.spectral_axes
    xp = pad_to_pow2(x, axes)
    stacked = _dft(xp, axes)
    return Spectrum(stacked[0], stacked[1], centered=False, axes=axes)


def magnitude(s: Spectrum) -> Tensor:
    """sqrt(re^2 + im^2); the gradient is taken as 0 at exact zeros."""
    re, im = s.real.data, s.imag.data
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError in record
        mag = np.sqrt(re * re + im * im)

    def _bw(g):
        inv = np.where(mag > 0, 1.0 / np.maximum(mag, MAG_FLOOR), 0.0)
        return g * re * inv, g * im * inv

    return T.record(mag, (s.real, s.imag), _bw, "magnitude")


def _half_shifts(s: Spectrum, sign: int) -> tuple[int, ...]:
    return tuple(sign * (s.shape[ax] // 2) for ax in s.axes)


def center_shift(s: Spectrum) -> Spectrum:
    """Rotate each transformed axis by floor(n/2) so DC sits at the midpoint."""
    if s.centered:
        raise ValueError("spectrum is already centred")
    sh = _half_shifts(s, +1)
    return Spectrum(T.roll(s.real, sh, s.axes), T.roll(s.imag, sh, s.axes), True, s.axes)


def inverse_shift(s: Spectrum) -> Spectrum:
    if not s.centered:
        raise ValueError("spectrum is not centred")
    sh = _half_shifts(s, -1)
    return Spectrum(T.roll(s.real, sh, s.axes), T.roll(s.imag, sh, s.axes), False, s.axes)


# ---------------------------------------------------------------------------
# frequency masks


@dataclass(frozen=True)
class FrequencyMask:
    values: Tensor
    sigma_low: float
    sigma_high: float
    high_weight: float

    @property
    def extents(self) -> tuple[int, ...]:
        return self.values.shape


def normalized_distance(extents: tuple[int, ...]) -> np.ndarray:
    """Distance of every bin to the centred DC bin, divided by the largest one."""
    extents = tuple(int(e) for e in extents)
    centers = [e // 2 for e in extents]
    grids = np.meshgrid(*[np.arange(e) - c for e, c in zip(extents, centers)], indexing="ij")
    d = np.sqrt(sum(g.astype(np.float64) ** 2 for g in grids))
    d_max = math.sqrt(sum(max(c, e - 1 - c) ** 2 for e, c in zip(extents, centers)))
    if d_max == 0:
        return np.zeros(extents)
    return d / d_max


def low_band(d: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-((np.asarray(d) / sigma) ** 2))


def high_band(d: np.ndarray, sigma: float) -> np.ndarray:
    return 1.0 - np.exp(-((np.asarray(d) / sigma) ** 2))


def build_mask(extents, sigma_low: float = 0.5, sigma_high: float = 0.5, high_weight: float = 0.2) -> FrequencyMask:
    if sigma_low <= 0 or sigma_high <= 0:
        raise ValueError(f"sigmas must be positive, got {sigma_low}, {sigma_high}")
    if not 0.0 <= high_weight <= 1.0:
        raise ValueError(f"high_weight must lie in [0, 1], got {high_weight}")
    d = normalized_distance(tuple(extents))
    m = np.clip(low_band(d, sigma_low) + high_weight * high_band(d, sigma_high), 0.0, 1.0)
    return FrequencyMask(Tensor(m), float(sigma_low), float(sigma_high), float(high_weight))


def identity_mask(extents) -> FrequencyMask:
    """All-ones mask: the filter switched off."""
    return FrequencyMask(Tensor(np.ones(tuple(extents))), math.inf, math.inf, 0.0)


def apply_mask(spec_mag: Tensor, m: FrequencyMask, layout: Layout) -> Tensor:
    """Hadamard product with the mask, broadcast over batch and channels."""
    layout = Layout(layout)
    axes = layout.spectral_axes
    ext = tuple(spec_mag.shape[ax] for ax in axes)
    if ext != m.extents:
        raise ShapeError(f"mask extents {m.extents} do not match spectrum extents {ext}")
    vals = m.values
    if layout is Layout.SEQ:
        vals = T.reshape(vals, (ext[0], 1))
    return spec_mag * vals


# ---------------------------------------------------------------------------
# pooling


def avg_downsample(x: Tensor, layout: Layout, factor: int) -> Tensor:
    """Non-overlapping mean pooling along tokens (SEQ) or over (H, W) (GRID)."""
    layout = Layout(layout)
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"pool factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    if layout is Layout.SEQ:
        b, n, c = x.shape
        if n % factor:
            raise ShapeError(f"token extent {n} not divisible by pool factor {factor}")
        return T.reduce("mean", T.reshape(x, (b, n // factor, factor, c)), 2)
    b, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"grid {h}x{w} not divisible by pool factor {factor}")
    y = T.reshape(x, (b, c, h // factor, factor, w // factor, factor))
    return T.reduce("mean", y, (3, 5))


# ---------------------------------------------------------------------------
# UHKDSPEC dump format
#
#   magic   8 bytes  b"UHKDSPEC"
#   version u32 LE
#   rank    u32 LE
#   extents rank x u64 LE
#   real    prod(extents) x f64 LE, row-major
#   imag    prod(extents) x f64 LE, row-major


def encode_spectrum(real: np.ndarray, imag: np.ndarray) -> bytes:
    real = np.asarray(real, dtype=np.float64)
    imag = np.asarray(imag, dtype=np.float64)
    if real.shape != imag.shape:
        raise ShapeError(f"real {real.shape} and imag {imag.shape} differ")
    head = SPEC_MAGIC + struct.pack("<II", SPEC_VERSION, real.ndim)
    head += struct.pack(f"<{real.ndim}Q", *real.shape)
    return head + real.astype("<f8").tobytes(order="C") + imag.astype("<f8").tobytes(order="C")


def decode_spectrum(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    if buf[:8] != SPEC_MAGIC:
        raise ValueError("not a UHKDSPEC file")
    version, rank = struct.unpack_from("<II", buf, 8)
    if version != SPEC_VERSION:
        raise ValueError(f"unsupported UHKDSPEC version {version}")
    shape = struct.unpack_from(f"<{rank}Q", buf, 16)
    off = 16 + 8 * rank
    count = math.prod(shape)
    if len(buf) != off + 16 * count:
        raise ValueError(f"UHKDSPEC payload is {len(buf) - off} bytes, expected {16 * count}")
    real = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape)
    imag = np.frombuffer(buf, dtype="<f8", count=count, offset=off + 8 * count).reshape(shape)
    return real.astype(np.float64), imag.astype(np.float64)


def dump_spectrum(s: Spectrum, path) -> None:
    Path(path).write_bytes(encode_spectrum(s.real.data, s.imag.data))


def load_spectrum(path) -> tuple[np.ndarray, np.ndarray]:
    return decode_spectrum(Path(path).read_bytes())
