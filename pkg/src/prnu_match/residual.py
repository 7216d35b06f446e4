"""Noise residual extraction via wavelet-domain locally adaptive Wiener denoising.

The residual W = I - denoise(I) keeps the sensor's multiplicative pattern noise:
the approximation band passes through untouched and only detail coefficients are
shrunk, so W is high-pass by construction. The transform is a periodized 8-tap
Daubechies filter bank implemented here directly (orthonormal, hence perfectly
reconstructing for even-length signals); non-dyadic sizes are reflect-padded and
cropped back after the inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from . import _container
from .imaging import Image

# 8-tap Daubechies scaling filter (orthonormal: sums to sqrt(2), unit energy,
# vanishing even-lag autocorrelation). The quadrature mirror highpass follows.
_DB4_LO = np.array(
    [
        0.230377813308855230,
        0.714846570552541500,
        0.630880767929590400,
        -0.027983769416983850,
        -0.187034811718881140,
        0.030841381835986965,
        0.032883011666982945,
        -0.010597401784997278,
    ]
)
_DB4_HI = (_DB4_LO[::-1] * np.where(np.arange(8) % 2 == 0, 1.0, -1.0)).copy()

_FILTERS = {"db4": (_DB4_LO, _DB4_HI)}


@dataclass(frozen=True)
class DenoiserConfig:
    """Parameters of the wavelet Wiener residual extractor.

    sigma0_sq is the assumed stationary noise variance on the 0..255 intensity
    scale; window_sizes are the local-variance estimation windows.
    """

    wavelet: str = "db4"
    levels: int = 4
    sigma0_sq: float = 9.0
    window_sizes: tuple[int, ...] = (3, 5, 7, 9)

    def __post_init__(self) -> None:
        if self.wavelet not in _FILTERS:
            raise ConfigError(f"unknown wavelet {self.wavelet!r}; available: {sorted(_FILTERS)}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.sigma0_sq <= 0:
            raise ConfigError(f"sigma0_sq must be > 0, got {self.sigma0_sq}")
        if not self.window_sizes or any(w < 1 or w % 2 == 0 for w in self.window_sizes):
            raise ConfigError(f"window sizes must be odd and positive, got {self.window_sizes}")


@dataclass
class NoiseResidual:
    """Per-image noise residual, same dims as the source image."""

    values: np.ndarray
    device_id: str | None = None
    compression_history: tuple[tuple[str, int | None], ...] = ()


@dataclass
class SubbandPyramid:
    """Wavelet decomposition: coarsest approximation plus per-level detail triples.

    details[0] is the finest level; each triple is (lh, hl, hh) where the first
    letter names the row filter and the second the column filter.
    """

    ll: np.ndarray
    details: tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]
    original_shape: tuple[int, int]
    wavelet: str = "db4"


def _afb1d(x: np.ndarray, lo: np.ndarray, hi: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    # periodized analysis: a[k] = sum_n h[n] x[(2k+n) mod N]
    acc_lo = np.zeros_like(x)
    acc_hi = np.zeros_like(x)
    for n in range(len(lo)):
        r = np.roll(x, -n, axis=axis)
        acc_lo += lo[n] * r
        acc_hi += hi[n] * r
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(0, None, 2)
    return acc_lo[tuple(sl)], acc_hi[tuple(sl)]


def _sfb1d(a: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray, axis: int) -> np.ndarray:
    # transpose of the analysis operator: x[m] = sum_k a[k] h[(m-2k) mod N] + ...
    n_out = a.shape[axis] * 2
    shape = list(a.shape)
    shape[axis] = n_out
    up_a = np.zeros(shape)
    up_d = np.zeros(shape)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(0, None, 2)
    up_a[tuple(sl)] = a
    up_d[tuple(sl)] = d
    out = np.zeros(shape)
    for n in range(len(lo)):
        out += lo[n] * np.roll(up_a, n, axis=axis)
        out += hi[n] * np.roll(up_d, n, axis=axis)
    return out


def dwt2(a: np.ndarray, cfg: DenoiserConfig | None = None) -> SubbandPyramid:
    """Multi-level 2-D wavelet decomposition with reflective padding to 2^levels."""
    cfg = cfg or DenoiserConfig()
    lo, hi = _FILTERS[cfg.wavelet]
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"dwt2 expects a 2-D array, got shape {a.shape}")
    h, w = a.shape
    block = 2 ** cfg.levels
    if min(h, w) < block // 2:
        raise DimensionError(f"array {h}x{w} too small for {cfg.levels} levels")
    pad_h = (-h) % block
    pad_w = (-w) % block
    if pad_h or pad_w:
        a = np.pad(a, ((0, pad_h), (0, pad_w)), mode="symmetric")
    details = []
    cur = a
    for _ in range(cfg.levels):
        row_lo, row_hi = _afb1d(cur, lo, hi, axis=0)
        ll, lh = _afb1d(row_lo, lo, hi, axis=1)
        hl, hh = _afb1d(row_hi, lo, hi, axis=1)
        details.append((lh, hl, hh))
        cur = ll
    return SubbandPyramid(ll=cur, details=tuple(details), original_shape=(h, w), wavelet=cfg.wavelet)


def idwt2(pyr: SubbandPyramid) -> np.ndarray:
    """Inverse of dwt2; returns an array of the original (pre-padding) shape."""
    lo, hi = _FILTERS[pyr.wavelet]
    cur = pyr.ll
    for lh, hl, hh in reversed(pyr.details):
        row_lo = _sfb1d(cur, lh, lo, hi, axis=1)
        row_hi = _sfb1d(hl, hh, lo, hi, axis=1)
        cur = _sfb1d(row_lo, row_hi, lo, hi, axis=0)
    h, w = pyr.original_shape
    return cur[:h, :w]


def _box_mean(x: np.ndarray, size: int) -> np.ndarray:
    # zero-padded window sum divided by the full window area (conv2 'same' semantics)
    h, w = x.shape
    r = size // 2
    padded = np.zeros((h + 2 * r, w + 2 * r))
    padded[r : r + h, r : r + w] = x
    ii = np.zeros((h + 2 * r + 1, w + 2 * r + 1))
    ii[1:, 1:] = padded.cumsum(axis=0).cumsum(axis=1)
    sums = ii[size:, size:] - ii[:-size, size:] - ii[size:, :-size] + ii[:-size, :-size]
    return sums / (size * size)


def wiener_shrink(subband: np.ndarray, sigma0_sq: float, window_sizes: tuple[int, ...] = (3, 5, 7, 9)) -> np.ndarray:
    """Locally adaptive Wiener attenuation of one detail subband.

    Per coefficient: s2 = min over windows of max(0, localMean(c^2) - sigma0_sq),
    output = c * s2 / (s2 + sigma0_sq). The output is the denoised coefficient, a
    pointwise contraction of the input.
    """
    if sigma0_sq <= 0:
        raise ConfigError(f"sigma0_sq must be > 0, got {sigma0_sq}")
    c2 = subband * subband
    s2 = None
    for w in window_sizes:
        est = _box_mean(c2, w)
        s2 = est if s2 is None else np.minimum(s2, est)
    s2 = np.maximum(s2 - sigma0_sq, 0.0)
    return subband * (s2 / (s2 + sigma0_sq))


def zero_mean(a: np.ndarray) -> np.ndarray:
    """Remove row means, then column means (kills row/column systematic artifacts)."""
    a = np.asarray(a, dtype=np.float64)
    out = a - a.mean(axis=1, keepdims=True)
    out -= out.mean(axis=0, keepdims=True)
    return out


def extract_residual(img: Image | np.ndarray, cfg: DenoiserConfig | None = None) -> NoiseResidual:
    """Noise residual W = I - denoise(I), zero-meaned.

    denoise reconstructs from the untouched approximation band and Wiener-shrunk
    detail bands, so W carries only high-frequency content.
    """
    cfg = cfg or DenoiserConfig()
    if isinstance(img, Image):
        samples = img.samples
        device_id = img.device_id
        history = img.compression_history
    else:
        samples = np.asarray(img, dtype=np.float64)
        device_id = None
        history = ()
    pyr = dwt2(samples, cfg)
    shrunk = tuple(
        tuple(wiener_shrink(band, cfg.sigma0_sq, cfg.window_sizes) for band in triple)
        for triple in pyr.details
    )
    denoised = idwt2(SubbandPyramid(pyr.ll, shrunk, pyr.original_shape, pyr.wavelet))
    w = zero_mean(samples - denoised)
    return NoiseResidual(values=w, device_id=device_id, compression_history=history)


def save_residual(res: NoiseResidual, path) -> None:
    """Persist a residual in the shared binary container (n_images = 1)."""
    _container.write(path, res.values, n_images=1, flags=_container.FLAG_ZERO_MEANED,
                     device_id=res.device_id or "")


def load_residual(path) -> NoiseResidual:
    values, _n, _flags, device_id = _container.read(path)
    return NoiseResidual(values=values, device_id=device_id or None)
