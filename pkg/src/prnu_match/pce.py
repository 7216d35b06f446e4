"""Classical matcher: normalized cross-correlation and peak-to-correlation energy.

The correlation surface over all circular shifts is computed in the frequency
domain. For synchronized data the peak is read at shift (0,0), never searched;
PCE is the signed squared peak over the mean off-peak energy outside a small
exclusion neighborhood.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError


@dataclass(frozen=True)
class PceScore:
    pce: float
    peak_shift: tuple[int, int] = (0, 0)
    exclusion_radius: int = 5


def _as_2d(x, attr: str) -> np.ndarray:
    return np.asarray(getattr(x, attr, x), dtype=np.float64)


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-shift normalized cross-correlation of mean-removed arrays, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    a0 = a - a.mean()
    b0 = b - b.mean()
    na = np.linalg.norm(a0)
    nb = np.linalg.norm(b0)
    if na < 1e-12 or nb < 1e-12:
        raise DegenerateInputError("constant input has no correlation")
    return float((a0 * b0).sum() / (na * nb))


def corr_surface(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Circular cross-correlation over all shifts: out[s] = sum_x a[x] * b[x+s]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    fa = np.fft.fft2(a)
    fb = np.fft.fft2(b)
    return np.real(np.fft.ifft2(np.conj(fa) * fb))


def pce(w, fp, exclusion_radius: int = 5, intensity: np.ndarray | None = None) -> PceScore:
    """Signed peak-to-correlation energy between a residual and a fingerprint.

    Accepts NoiseResidual / Fingerprint objects or bare arrays. Both inputs are
    mean-removed; the peak is read at shift (0,0) (synchronized inputs) and the
    energy is averaged outside the (2r+1)^2 circular neighborhood of the peak.

    By default W is correlated against K directly (same inputs the learned
    matcher sees). Passing the test image's luminance as `intensity` switches to
    the intensity-weighted reference I*K.
    """
    wv = _as_2d(w, "values")
    kv = _as_2d(fp, "K")
    if intensity is not None:
        iv = _as_2d(intensity, "samples")
        if iv.shape != kv.shape:
            raise DimensionError(f"intensity shape {iv.shape} vs fingerprint {kv.shape}")
        kv = iv * kv
    if wv.shape != kv.shape:
        raise DimensionError(f"shape mismatch {wv.shape} vs {kv.shape}")
    h, wd = wv.shape
    r = int(exclusion_radius)
    if r < 0:
        raise ConfigError(f"exclusion radius must be >= 0, got {r}")
    rows_in = np.minimum(np.arange(h), h - np.arange(h)) <= r
    cols_in = np.minimum(np.arange(wd), wd - np.arange(wd)) <= r
    excluded = np.outer(rows_in, cols_in)
    n_excluded = int(excluded.sum())
    if n_excluded >= h * wd:
        raise ConfigError(f"exclusion radius {r} covers the whole {h}x{wd} surface")

    surface = corr_surface(wv - wv.mean(), kv - kv.mean())
    peak = surface[0, 0]
    energy = float((surface[~excluded] ** 2).mean())
    if energy < 1e-300:
        raise DegenerateInputError("correlation surface has no off-peak energy")
    value = float(np.sign(peak) * peak * peak / energy)
    return PceScore(pce=value, peak_shift=(0, 0), exclusion_radius=r)
