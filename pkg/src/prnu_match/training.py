"""Training loop for the pair-wise correlation network.

Every epoch draws fresh batches of size 2 * n_devices: per device one coherent
pair (own fingerprint, one of its residuals) labelled 1 and one non-coherent
pair (another device's fingerprint, one of its own residuals) labelled 0, so
labels balance exactly. Validation accuracy (score > 0.5 vs label) drives early
stopping: training stops once it has not improved for `patience` consecutive
epochs, and the best-epoch weights are restored.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .fingerprint import Fingerprint
from .imaging import crop_center
from .pcn import (
    PcnArch,
    PcnModel,
    backward_batch,
    build_pair,
    forward_batch,
    init_model,
    model_from_bytes,
    model_to_bytes,
    pcn_forward_batch,
    sigmoid,
)
from .residual import NoiseResidual

CHECKPOINT_MAGIC = b"ADAM"


@dataclass
class DeviceEntry:
    """One device: fingerprint plus disjoint train/val/eval residual pools."""

    device_id: str
    fingerprint: Fingerprint
    train_pool: list[NoiseResidual]
    val_pool: list[NoiseResidual]
    eval_pool: list[NoiseResidual]


@dataclass
class DeviceSet:
    devices: list[DeviceEntry]

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    def subset(self, device_ids: list[str]) -> "DeviceSet":
        wanted = set(device_ids)
        return DeviceSet([d for d in self.devices if d.device_id in wanted])


@dataclass(frozen=True)
class TrainConfig:
    crop_p: int = 64
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 30
    max_epochs: int = 500
    seed: int = 0
    batches_per_epoch: int | None = None  # default: ceil(mean train-pool size)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if not 0 < self.patience < self.max_epochs:
            raise ConfigError(
                f"patience must be in 1..max_epochs-1, got patience={self.patience} max_epochs={self.max_epochs}"
            )
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ConfigError(f"batches_per_epoch must be >= 1, got {self.batches_per_epoch}")


@dataclass
class TrainHistory:
    epochs: tuple[tuple[float, float], ...]  # (train_loss, val_accuracy) per epoch
    best_epoch: int  # 1-based epoch whose weights were returned
    stopped_reason: str  # "patience" or "max_epochs"

    @property
    def best_val_accuracy(self) -> float:
        return self.epochs[self.best_epoch - 1][1]

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("epoch,train_loss,val_accuracy\n")
            for i, (loss, acc) in enumerate(self.epochs, start=1):
                f.write(f"{i},{loss!r},{acc!r}\n")


# ---------------------------------------------------------------------------
# Batch construction
# ---------------------------------------------------------------------------

def build_epoch_batches(
    ds: DeviceSet, crop_p: int, rng: np.random.Generator, n_batches: int | None = None
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Batches of (pairs, labels); each batch holds 2 * n_devices pair tensors.

    Per device d: one coherent pair (K_d, W_d) with W_d uniform from d's train
    pool, and one non-coherent pair (K_other, W_d) with the other device uniform
    over the remaining devices and W_d drawn independently from d's pool.
    """
    nd = ds.n_devices
    if nd < 2:
        raise ConfigError("need at least 2 devices so non-coherent pairs exist")
    if n_batches is None:
        n_batches = math.ceil(sum(len(d.train_pool) for d in ds.devices) / nd)
    k_crops = [crop_center(d.fingerprint.K, crop_p) for d in ds.devices]
    batches = []
    for _ in range(n_batches):
        pairs = np.empty((2 * nd, crop_p, crop_p, 2))
        labels = np.empty(2 * nd)
        for di, dev in enumerate(ds.devices):
            w = dev.train_pool[int(rng.integers(len(dev.train_pool)))].values
            pairs[2 * di] = build_pair(k_crops[di], crop_center(w, crop_p))
            labels[2 * di] = 1.0
            j = int(rng.integers(nd - 1))
            if j >= di:
                j += 1
            w2 = dev.train_pool[int(rng.integers(len(dev.train_pool)))].values
            pairs[2 * di + 1] = build_pair(k_crops[j], crop_center(w2, crop_p))
            labels[2 * di + 1] = 0.0
        batches.append((pairs, labels))
    return batches


def _validation_pairs(ds: DeviceSet, crop_p: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic balanced validation set: every val residual appears once as a
    coherent pair and once as a non-coherent pair with a rotating wrong device."""
    nd = ds.n_devices
    k_crops = [crop_center(d.fingerprint.K, crop_p) for d in ds.devices]
    pairs = []
    labels = []
    for di, dev in enumerate(ds.devices):
        for i, res in enumerate(dev.val_pool):
            w = crop_center(res.values, crop_p)
            pairs.append(build_pair(k_crops[di], w))
            labels.append(1.0)
            j = (di + 1 + (i % (nd - 1))) % nd
            pairs.append(build_pair(k_crops[j], w))
            labels.append(0.0)
    return np.stack(pairs), np.array(labels)


# ---------------------------------------------------------------------------
# Loss and optimizer
# ---------------------------------------------------------------------------

def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Numerically stable sigmoid cross-entropy; returns per-element (loss, dloss/dlogit)."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = sigmoid(z) - y
    return loss, grad


@dataclass
class AdamState:
    t: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(t=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, cfg: TrainConfig
) -> None:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train(
    ds: DeviceSet,
    cfg: TrainConfig,
    arch: PcnArch | None = None,
    log=None,
) -> tuple[PcnModel, TrainHistory]:
    """Train a PCN on the device set; returns the best-validation-epoch weights."""
    if ds.n_devices < 2:
        raise ConfigError("need at least 2 devices to train")
    for dev in ds.devices:
        if not dev.train_pool or not dev.val_pool:
            raise ConfigError(f"device {dev.device_id} lacks train or val residuals")
    init_ss, _unused = np.random.SeedSequence(cfg.seed).spawn(2)
    model = init_model(arch or PcnArch(), seed=init_ss)
    min_p = model.arch.min_input_size()
    if cfg.crop_p < min_p:
        raise DimensionError(f"crop size {cfg.crop_p} below architecture minimum {min_p}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    val_pairs, val_labels = _validation_pairs(ds, cfg.crop_p)

    params = model.parameters()
    state = AdamState.for_params(params)
    best_acc = -1.0
    best_epoch = 0
    best_weights = [p.copy() for p in params]
    epochs: list[tuple[float, float]] = []
    epochs_since_best = 0
    stopped_reason = "max_epochs"

    for epoch in range(1, cfg.max_epochs + 1):
        batches = build_epoch_batches(ds, cfg.crop_p, rng, cfg.batches_per_epoch)
        loss_sum = 0.0
        for pairs, labels in batches:
            logits, cache = forward_batch(pairs, model)
            loss_vec, grad_vec = bce_with_logits(logits, labels)
            loss = float(loss_vec.mean())
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}; aborting")
            grads, _ = backward_batch(model, cache, grad_vec / len(grad_vec))
            adam_step(params, grads, state, cfg)
            loss_sum += loss
        train_loss = loss_sum / len(batches)
        val_logits = forward_batch(val_pairs, model)[0]
        val_acc = float(((val_logits > 0.0) == (val_labels > 0.5)).mean())
        epochs.append((train_loss, val_acc))
        if log:
            log(f"epoch {epoch}: train_loss={train_loss:.6f} val_accuracy={val_acc:.4f}")
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_weights = [p.copy() for p in params]
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                stopped_reason = "patience"
                break

    for p, w in zip(params, best_weights):
        p[:] = w
    return model, TrainHistory(epochs=tuple(epochs), best_epoch=best_epoch, stopped_reason=stopped_reason)


def validation_accuracy(ds: DeviceSet, model: PcnModel, crop_p: int, threads: int = 1) -> float:
    """Accuracy of (c_s > 0.5) == label over the deterministic validation pairs."""
    pairs, labels = _validation_pairs(ds, crop_p)
    logits = pcn_forward_batch(pairs, model, threads)
    return float(((logits > 0.0) == (labels > 0.5)).mean())


# ---------------------------------------------------------------------------
# Checkpoints: model container followed by an optimizer state appendix
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: PcnModel, state: AdamState) -> None:
    blob = model_to_bytes(model)
    parts = [struct.pack("<I", len(blob)), blob, CHECKPOINT_MAGIC, struct.pack("<Q", state.t)]
    for m, v in zip(state.m, state.v):
        parts.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> tuple[PcnModel, AdamState]:
    from .errors import FormatError, IoError

    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if len(data) < 4:
        raise FormatError(f"{path}: truncated checkpoint")
    (blob_len,) = struct.unpack_from("<I", data, 0)
    model = model_from_bytes(data[4 : 4 + blob_len], origin=str(path))
    pos = 4 + blob_len
    if data[pos : pos + 4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: missing optimizer state appendix")
    pos += 4
    (t,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    params = model.parameters()
    m_list = []
    v_list = []
    for p in params:
        for dst in (m_list, v_list):
            count = p.size
            end = pos + count * 8
            if end > len(data):
                raise FormatError(f"{path}: truncated optimizer state")
            dst.append(np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(p.shape).copy())
            pos = end
    return model, AdamState(t=t, m=m_list, v=v_list)
