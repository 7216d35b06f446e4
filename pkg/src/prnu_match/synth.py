"""Synthetic camera simulator: devices, flat-field and natural images, datasets.

The sensor model is multiplicative: I = I0 * (1 + K) + eta with K the device's
fixed zero-mean pattern (elementwise std = strength) and eta white Gaussian
read-out noise. Natural scenes are Gaussian-blurred random fields rescaled to
mid-range intensities. Images are quantized to integer gray levels at
generation so in-memory data and on-disk PGM files are bit-identical.

All randomness derives from the master seed through numpy SeedSequence streams
keyed by (master, device index, stream), so per-device generation is
order-independent and reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, FormatError, IoError
from .fingerprint import Fingerprint, FingerprintDb, estimate_prnu
from .imaging import Image, load_image, recompress_jpeg, save_pgm
from .residual import DenoiserConfig, extract_residual
from .training import DeviceEntry, DeviceSet

_STREAM_DEVICE = 0
_STREAM_FLAT = 1
_STREAM_NATURAL = 2
_STREAM_SPLIT = 3


@dataclass
class SynthDevice:
    device_id: str
    k_true: np.ndarray
    dims: tuple[int, int]
    seed: int


@dataclass(frozen=True)
class SynthConfig:
    """Dataset recipe; defaults give the standard desk-scale benchmark set."""

    n_devices: int = 20
    dims: tuple[int, int] = (128, 128)
    flats_per_device: int = 25
    naturals_per_device: int = 40
    strength: float = 0.02
    noise_std: float = 4.0
    flat_level_range: tuple[float, float] = (80.0, 180.0)
    jpeg_chain: tuple[int, ...] = ()
    split_ratios: tuple[float, float, float] = (0.5, 0.25, 0.25)
    master_seed: int = 0

    def __post_init__(self) -> None:
        if self.n_devices < 1 or self.flats_per_device < 1 or self.naturals_per_device < 1:
            raise ConfigError("device/image counts must be >= 1")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1, got {self.split_ratios}")
        if any(not 1 <= q <= 100 for q in self.jpeg_chain):
            raise ConfigError(f"JPEG qualities must be in 1..100, got {self.jpeg_chain}")
        lo, hi = self.flat_level_range
        if not 50 <= lo <= hi <= 220:
            raise ConfigError(f"flat levels must lie in [50, 220], got {self.flat_level_range}")


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _quantize(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(samples), 0.0, 255.0)


def _gen_pattern(rng: np.random.Generator, dims: tuple[int, int], strength: float) -> np.ndarray:
    if strength < 0:
        raise ConfigError(f"strength must be >= 0, got {strength}")
    k = rng.normal(0.0, strength, size=dims) if strength > 0 else np.zeros(dims)
    k -= k.mean()
    return k


def gen_device(seed: int, dims: tuple[int, int] = (128, 128), strength: float = 0.02) -> SynthDevice:
    """Device with a reproducible zero-mean Gaussian pattern of the given strength."""
    k = _gen_pattern(_rng(seed, _STREAM_DEVICE), tuple(dims), strength)
    return SynthDevice(device_id=f"dev{seed:04d}", k_true=k, dims=tuple(dims), seed=seed)


def gen_flat(
    dev: SynthDevice, level: float, noise_std: float, rng: np.random.Generator
) -> Image:
    """Flat-field exposure: I = level * (1 + K) + noise, quantized and clipped."""
    if not 50 <= level <= 220:
        raise ConfigError(f"flat level must be in [50, 220], got {level}")
    samples = level * (1.0 + dev.k_true)
    if noise_std > 0:
        samples = samples + rng.normal(0.0, noise_std, size=dev.dims)
    return Image(_quantize(samples), device_id=dev.device_id)


def gen_natural(dev: SynthDevice, noise_std: float, rng: np.random.Generator) -> Image:
    """Natural-scene stand-in: blurred random field scaled to [30, 220], then the
    multiplicative sensor model."""
    blur = rng.uniform(2.0, 16.0)
    base = gaussian_filter(rng.standard_normal(dev.dims), sigma=blur)
    lo, hi = base.min(), base.max()
    if hi - lo < 1e-12:
        base = np.full(dev.dims, 125.0)
    else:
        base = 30.0 + 190.0 * (base - lo) / (hi - lo)
    samples = base * (1.0 + dev.k_true)
    if noise_std > 0:
        samples = samples + rng.normal(0.0, noise_std, size=dev.dims)
    return Image(_quantize(samples), device_id=dev.device_id)


def _split_counts(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    return n_train, n_val, n - n_train - n_val


def _apply_chain(img: Image, chain: tuple[int, ...]) -> Image:
    for q in chain:
        img = recompress_jpeg(img, q)
    return img


def build_dataset(
    cfg: SynthConfig,
    out_dir: str | os.PathLike | None = None,
    denoiser: DenoiserConfig | None = None,
) -> tuple[DeviceSet, FingerprintDb]:
    """Generate devices, estimate fingerprints from flats, split natural residuals.

    The JPEG chain is applied to every image (flats and naturals) before
    fingerprint estimation / residual extraction, mirroring the setting where
    only (re-)compressed data exists. With out_dir given, the post-chain pixels
    are written as `<out>/<device>/{flat,natural}/<index>.pgm` plus manifest.tsv.
    """
    counts = _split_counts(cfg.naturals_per_device, cfg.split_ratios)
    if min(counts) < 1:
        raise ConfigError(
            f"{cfg.naturals_per_device} naturals split {cfg.split_ratios} leaves an empty partition"
        )
    chain_label = "+".join(f"jpeg:{q}" for q in cfg.jpeg_chain) or "-"
    manifest_rows: list[tuple[str, str, str, str, str]] = []
    entries: list[DeviceEntry] = []
    fps: list[Fingerprint] = []

    for idx in range(cfg.n_devices):
        device_id = f"dev{idx:03d}"
        k = _gen_pattern(_rng(cfg.master_seed, idx, _STREAM_DEVICE), cfg.dims, cfg.strength)
        dev = SynthDevice(device_id=device_id, k_true=k, dims=cfg.dims, seed=idx)

        rng_flat = _rng(cfg.master_seed, idx, _STREAM_FLAT)
        flats = []
        for _ in range(cfg.flats_per_device):
            level = rng_flat.uniform(*cfg.flat_level_range)
            flats.append(_apply_chain(gen_flat(dev, level, cfg.noise_std, rng_flat), cfg.jpeg_chain))

        rng_nat = _rng(cfg.master_seed, idx, _STREAM_NATURAL)
        naturals = [
            _apply_chain(gen_natural(dev, cfg.noise_std, rng_nat), cfg.jpeg_chain)
            for _ in range(cfg.naturals_per_device)
        ]

        rng_split = _rng(cfg.master_seed, idx, _STREAM_SPLIT)
        order = rng_split.permutation(cfg.naturals_per_device)
        n_train, n_val, _ = counts
        roles = {}
        for pos, nat_idx in enumerate(order):
            roles[int(nat_idx)] = "train" if pos < n_train else ("val" if pos < n_train + n_val else "eval")

        fp = estimate_prnu(flats, denoiser, device_id=device_id)
        fps.append(fp)
        pools: dict[str, list] = {"train": [], "val": [], "eval": []}
        for nat_idx, img in enumerate(naturals):
            pools[roles[nat_idx]].append(extract_residual(img, denoiser))
        entries.append(
            DeviceEntry(
                device_id=device_id,
                fingerprint=fp,
                train_pool=pools["train"],
                val_pool=pools["val"],
                eval_pool=pools["eval"],
            )
        )

        if out_dir is not None:
            root = Path(out_dir)
            for sub, images, split_of in (
                ("flat", flats, lambda i: "-"),
                ("natural", naturals, lambda i: roles[i]),
            ):
                d = root / device_id / sub
                d.mkdir(parents=True, exist_ok=True)
                for i, img in enumerate(images):
                    rel = f"{device_id}/{sub}/{i:04d}.pgm"
                    save_pgm(img, root / rel)
                    manifest_rows.append((device_id, rel, sub, split_of(i), chain_label))

    if out_dir is not None:
        with open(Path(out_dir) / "manifest.tsv", "w") as f:
            f.write("device_id\tpath\trole\tsplit\tcompression\n")
            for row in manifest_rows:
                f.write("\t".join(row) + "\n")

    return DeviceSet(entries), FingerprintDb(fps)


def load_dataset(
    root: str | os.PathLike, denoiser: DenoiserConfig | None = None
) -> tuple[DeviceSet, FingerprintDb]:
    """Rebuild a DeviceSet + FingerprintDb from an on-disk dataset layout."""
    root = Path(root)
    manifest = root / "manifest.tsv"
    try:
        lines = manifest.read_text().splitlines()
    except OSError as e:
        raise IoError(f"cannot read {manifest}: {e}") from e
    if not lines or lines[0].split("\t") != ["device_id", "path", "role", "split", "compression"]:
        raise FormatError(f"{manifest}: unrecognized manifest header")

    per_device: dict[str, dict] = {}
    for ln in lines[1:]:
        if not ln.strip():
            continue
        parts = ln.split("\t")
        if len(parts) != 5:
            raise FormatError(f"{manifest}: malformed row {ln!r}")
        device_id, rel, role, split, chain = parts
        rec = per_device.setdefault(device_id, {"flat": [], "natural": []})
        history = tuple(
            ("jpeg", int(tok.split(":")[1])) for tok in chain.split("+") if tok.startswith("jpeg:")
        )
        raw = load_image(root / rel)
        img = Image(raw.samples, device_id=device_id, compression_history=history)
        if role == "flat":
            rec["flat"].append(img)
        elif role == "natural":
            rec["natural"].append((split, img))
        else:
            raise FormatError(f"{manifest}: unknown role {role!r}")

    entries = []
    fps = []
    for device_id in sorted(per_device):
        rec = per_device[device_id]
        if not rec["flat"] or not rec["natural"]:
            raise FormatError(f"device {device_id} lacks flats or naturals")
        fp = estimate_prnu(rec["flat"], denoiser, device_id=device_id)
        fps.append(fp)
        pools: dict[str, list] = {"train": [], "val": [], "eval": []}
        for split, img in rec["natural"]:
            if split not in pools:
                raise FormatError(f"unknown split {split!r} for device {device_id}")
            pools[split].append(extract_residual(img, denoiser))
        entries.append(
            DeviceEntry(
                device_id=device_id,
                fingerprint=fp,
                train_pool=pools["train"],
                val_pool=pools["val"],
                eval_pool=pools["eval"],
            )
        )
    return DeviceSet(entries), FingerprintDb(fps)
