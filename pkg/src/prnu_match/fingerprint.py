"""Maximum-likelihood PRNU estimation from flat-field images, plus persistence.

The estimator is K = sum_i(W_i * I_i) / (sum_i(I_i^2) + eps): residuals weighted
by intensity, normalized by accumulated squared intensity. Accumulation uses
compensated (Kahan) summation so the result is order-invariant to well below
float32 resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _container
from .errors import DimensionError, DuplicateError, EmptyInputError
from .imaging import Image, crop_center
from .residual import DenoiserConfig, extract_residual, zero_mean

_EPS = 1e-12


@dataclass
class Fingerprint:
    """Estimated device PRNU with estimation bookkeeping."""

    device_id: str
    K: np.ndarray
    n_images: int
    zero_meaned: bool = True


def _kahan_add(total: np.ndarray, comp: np.ndarray, x: np.ndarray) -> None:
    y = x - comp
    t = total + y
    comp[:] = (t - total) - y
    total[:] = t


def estimate_prnu_from_residuals(
    residuals: list[np.ndarray],
    intensities: list[np.ndarray],
    device_id: str = "unknown",
    apply_zero_mean: bool = True,
) -> Fingerprint:
    """Core ML accumulation given precomputed residual/intensity pairs."""
    if not residuals:
        raise EmptyInputError("need at least one image to estimate a fingerprint")
    if len(residuals) != len(intensities):
        raise DimensionError("residual and intensity lists differ in length")
    shape = residuals[0].shape
    num = np.zeros(shape)
    num_c = np.zeros(shape)
    den = np.zeros(shape)
    den_c = np.zeros(shape)
    for w, i in zip(residuals, intensities):
        if w.shape != shape or i.shape != shape:
            raise DimensionError(f"image dims {i.shape} differ from first image {shape}")
        _kahan_add(num, num_c, w * i)
        _kahan_add(den, den_c, i * i)
    k = num / (den + _EPS)
    if apply_zero_mean:
        k = zero_mean(k)
    return Fingerprint(device_id=device_id, K=k, n_images=len(residuals), zero_meaned=apply_zero_mean)


def estimate_prnu(
    images: list[Image],
    cfg: DenoiserConfig | None = None,
    device_id: str | None = None,
) -> Fingerprint:
    """Estimate a device fingerprint from (ideally flat-field) images."""
    if not images:
        raise EmptyInputError("need at least one image to estimate a fingerprint")
    shape = images[0].samples.shape
    for img in images:
        if img.samples.shape != shape:
            raise DimensionError(f"image dims {img.samples.shape} differ from first image {shape}")
    residuals = [extract_residual(img, cfg).values for img in images]
    intensities = [img.samples for img in images]
    ident = device_id or images[0].device_id or "unknown"
    return estimate_prnu_from_residuals(residuals, intensities, device_id=ident)


def save_fingerprint(fp: Fingerprint, path) -> None:
    flags = _container.FLAG_ZERO_MEANED if fp.zero_meaned else 0
    _container.write(path, fp.K, n_images=fp.n_images, flags=flags, device_id=fp.device_id)


def load_fingerprint(path) -> Fingerprint:
    values, n_images, flags, device_id = _container.read(path)
    return Fingerprint(
        device_id=device_id,
        K=values,
        n_images=n_images,
        zero_meaned=bool(flags & _container.FLAG_ZERO_MEANED),
    )


class FingerprintDb:
    """Ordered collection of fingerprints with unique device ids."""

    def __init__(self, entries: list[Fingerprint] | tuple[Fingerprint, ...] = ()):
        self._entries: list[Fingerprint] = []
        self._ids: set[str] = set()
        for fp in entries:
            self.add(fp)

    def add(self, fp: Fingerprint) -> None:
        if fp.device_id in self._ids:
            raise DuplicateError(f"device id {fp.device_id!r} already in database")
        self._ids.add(fp.device_id)
        self._entries.append(fp)

    def crop_all(self, size: int) -> "FingerprintDb":
        """New database with every fingerprint centrally cropped to size x size."""
        cropped = [replace(fp, K=crop_center(fp.K, size).copy()) for fp in self._entries]
        return FingerprintDb(cropped)

    @property
    def device_ids(self) -> tuple[str, ...]:
        return tuple(fp.device_id for fp in self._entries)

    def get(self, device_id: str) -> Fingerprint:
        for fp in self._entries:
            if fp.device_id == device_id:
                return fp
        raise KeyError(device_id)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __getitem__(self, idx: int) -> Fingerprint:
        return self._entries[idx]
