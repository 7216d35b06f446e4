"""Pair-wise correlation network: conv stack, pair-wise correlation pooling, FC head.

The pooling layer turns a square feature stack with an even channel count into one
value per adjacent channel pair: the spatial mean of the product of channels
(2n-1, 2n) in 1-based terms. It is the diagonal-pair restriction of bilinear
pooling, which is what lets one trained model score inputs of any admissible
spatial size.

Tensors are numpy arrays shaped (batch, height, width, channels). Weights and
activations are float32 by default (matching the on-disk model format); build
models with dtype=np.float64 for gradient checking. Forward/backward kernels
inherit the model's dtype.
"""

from __future__ import annotations

import math
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, FormatError, IoError
from .imaging import normalize_by_std

MODEL_MAGIC = b"PCNW"
MODEL_VERSION = 1


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int


@dataclass(frozen=True)
class PcnArch:
    """Architecture descriptor; the last conv must feed 2 channels per pooled pair."""

    in_channels: int = 2
    convs: tuple[ConvSpec, ...] = (ConvSpec(32, 3, 2), ConvSpec(64, 3, 2), ConvSpec(64, 3, 1))
    pool_pairs: int = 32

    def __post_init__(self) -> None:
        if not self.convs:
            raise ConfigError("architecture needs at least one conv layer")
        for c in self.convs:
            if c.out_channels < 1 or c.kernel < 1 or c.stride < 1:
                raise ConfigError(f"invalid conv spec {c}")
        if self.pool_pairs < 1:
            raise ConfigError(f"pool_pairs must be >= 1, got {self.pool_pairs}")
        if self.convs[-1].out_channels != 2 * self.pool_pairs:
            raise ConfigError(
                f"last conv outputs {self.convs[-1].out_channels} channels; "
                f"pair-wise pooling over {self.pool_pairs} pairs needs {2 * self.pool_pairs}"
            )

    def min_input_size(self) -> int:
        need = 1
        for c in reversed(self.convs):
            need = c.stride * (need - 1) + c.kernel
        return need

    def output_spatial(self, size: int) -> int:
        for c in self.convs:
            if size < c.kernel:
                raise DimensionError(f"spatial size {size} smaller than kernel {c.kernel}")
            size = (size - c.kernel) // c.stride + 1
        return size


@dataclass
class ConvLayer:
    w: np.ndarray  # (kernel, kernel, in_channels, out_channels)
    b: np.ndarray  # (out_channels,)
    stride: int


@dataclass
class PcnModel:
    arch: PcnArch
    convs: list[ConvLayer]
    fc_w: np.ndarray  # (pool_pairs,)
    fc_b: np.ndarray  # (1,)

    def parameters(self) -> list[np.ndarray]:
        params: list[np.ndarray] = []
        for layer in self.convs:
            params.extend((layer.w, layer.b))
        params.extend((self.fc_w, self.fc_b))
        return params

    @property
    def dtype(self) -> np.dtype:
        return self.fc_w.dtype


@dataclass(frozen=True)
class MatchScore:
    """Network output: raw logit and its sigmoid (the identification score)."""

    logit: float
    c_s: float


def init_model(
    arch: PcnArch | None = None,
    seed: int | np.random.SeedSequence = 0,
    dtype=np.float32,
) -> PcnModel:
    """He-uniform conv and FC weights, zero biases, fully seeded.

    dtype=np.float64 gives the high-precision mode used for gradient checking.
    """
    arch = arch or PcnArch()
    rng = np.random.default_rng(seed)
    convs = []
    cin = arch.in_channels
    for spec in arch.convs:
        fan_in = spec.kernel * spec.kernel * cin
        limit = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(spec.kernel, spec.kernel, cin, spec.out_channels))
        convs.append(ConvLayer(w=w.astype(dtype), b=np.zeros(spec.out_channels, dtype=dtype), stride=spec.stride))
        cin = spec.out_channels
    limit = math.sqrt(6.0 / arch.pool_pairs)
    fc_w = rng.uniform(-limit, limit, size=arch.pool_pairs).astype(dtype)
    return PcnModel(arch=arch, convs=convs, fc_w=fc_w, fc_b=np.zeros(1, dtype=dtype))


# ---------------------------------------------------------------------------
# Layer forward/backward
# ---------------------------------------------------------------------------

def conv2d_forward(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray,
    stride: int,
    workspace: dict | None = None,
    ws_key=None,
) -> np.ndarray:
    """Valid cross-correlation with the given stride; x is (n, h, w, c_in).

    Computed as an im2col gather followed by one GEMM. A workspace dict can
    recycle the gather/output buffers across calls of identical geometry.
    """
    n, h, wd, cin = x.shape
    kh, kw, cin_w, cout = w.shape
    if cin != cin_w:
        raise DimensionError(f"input has {cin} channels, kernel expects {cin_w}")
    if h < kh or wd < kw:
        raise DimensionError(f"input {h}x{wd} smaller than kernel {kh}x{kw}")
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    dtype = np.result_type(x, w)
    rows = n * ho * wo
    k = kh * kw * cin
    col = out2 = None
    if workspace is not None:
        cached = workspace.get(ws_key)
        if cached is not None and cached[0].shape == (rows, k) and cached[0].dtype == dtype \
                and cached[1].shape == (rows, cout):
            col, out2 = cached
    if col is None:
        col = np.empty((rows, k), dtype=dtype)
        out2 = np.empty((rows, cout), dtype=dtype)
        if workspace is not None:
            workspace[ws_key] = (col, out2)
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    np.copyto(col.reshape(n, ho, wo, kh, kw, cin), windows.transpose(0, 1, 2, 4, 5, 3))
    np.matmul(col, w.reshape(k, cout), out=out2)
    out2 += b
    return out2.reshape(n, ho, wo, cout)


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, stride: int, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (grad_x, grad_w, grad_b) for conv2d_forward."""
    kh, kw, _cin, _cout = w.shape
    _n, ho, wo, _ = grad_out.shape
    gb = grad_out.sum(axis=(0, 1, 2))
    gw = np.zeros_like(w)
    gx = np.zeros_like(x)
    for p in range(kh):
        for q in range(kw):
            xs = x[:, p : p + stride * ho : stride, q : q + stride * wo : stride, :]
            gw[p, q] = np.tensordot(xs, grad_out, axes=([0, 1, 2], [0, 1, 2]))
            gx[:, p : p + stride * ho : stride, q : q + stride * wo : stride, :] += grad_out @ w[p, q].T
    return gx, gw, gb


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0.0)


def pairwise_corr_pool_forward(x: np.ndarray) -> np.ndarray:
    """Spatial mean of adjacent channel-pair products: (n, s, s, 2m) -> (n, m)."""
    n, h, w, c = x.shape
    if c % 2 != 0:
        raise DimensionError(f"pair-wise pooling needs an even channel count, got {c}")
    if h != w:
        raise DimensionError(f"pair-wise pooling needs square spatial dims, got {h}x{w}")
    return (x[..., 0::2] * x[..., 1::2]).mean(axis=(1, 2))


def pairwise_corr_pool_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Bilinear-form gradient: each channel of a pair receives its partner scaled."""
    n, h, w, c = x.shape
    if grad_out.shape != (n, c // 2):
        raise DimensionError(f"gradient shape {grad_out.shape} does not match pooled ({n}, {c // 2})")
    g = grad_out[:, None, None, :] / (h * w)
    gx = np.empty_like(x)
    gx[..., 0::2] = g * x[..., 1::2]
    gx[..., 1::2] = g * x[..., 0::2]
    return gx


# ---------------------------------------------------------------------------
# Full network
# ---------------------------------------------------------------------------

def forward_batch(
    x: np.ndarray,
    model: PcnModel,
    keep_cache: bool = True,
    workspace: dict | None = None,
) -> tuple[np.ndarray, dict]:
    """Forward pass for a (n, p, p, 2) batch; returns logits (n,) plus a cache.

    The input is cast to the model's dtype (float32 in the default precision).
    With keep_cache=False (inference), activations are rectified in place, no
    intermediates are retained, and `workspace` can recycle per-layer buffers
    across calls of the same batch shape.
    """
    x = np.ascontiguousarray(x, dtype=model.dtype)
    if x.ndim != 4:
        raise DimensionError(f"expected (batch, h, w, channels), got shape {x.shape}")
    if x.shape[3] != model.arch.in_channels:
        raise DimensionError(f"expected {model.arch.in_channels} input channels, got {x.shape[3]}")
    if x.shape[1] != x.shape[2]:
        raise DimensionError(f"input must be spatially square, got {x.shape[1]}x{x.shape[2]}")
    min_p = model.arch.min_input_size()
    if x.shape[1] < min_p:
        raise DimensionError(f"input size {x.shape[1]} below architecture minimum {min_p}")
    cache: dict = {"inputs": [], "pre": []}
    cur = x
    for idx, layer in enumerate(model.convs):
        if keep_cache:
            cache["inputs"].append(cur)
            z = conv2d_forward(cur, layer.w, layer.b, layer.stride)
            cache["pre"].append(z)
            cur = relu_forward(z)
        else:
            z = conv2d_forward(cur, layer.w, layer.b, layer.stride, workspace=workspace, ws_key=idx)
            cur = np.maximum(z, 0.0, out=z)
    cache["pool_in"] = cur
    pooled = pairwise_corr_pool_forward(cur)
    cache["pooled"] = pooled
    logits = pooled @ model.fc_w + model.fc_b[0]
    return logits, cache


def backward_batch(model: PcnModel, cache: dict, grad_logits: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients in model.parameters() order, plus the gradient w.r.t. the input."""
    g = np.asarray(grad_logits, dtype=model.dtype)
    g_fc_w = cache["pooled"].T @ g
    g_fc_b = np.array([g.sum()])
    g_pooled = np.outer(g, model.fc_w)
    gcur = pairwise_corr_pool_backward(cache["pool_in"], g_pooled)
    conv_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.convs)  # type: ignore[list-item]
    for idx in range(len(model.convs) - 1, -1, -1):
        layer = model.convs[idx]
        gz = relu_backward(cache["pre"][idx], gcur)
        gcur, gw, gb = conv2d_backward(cache["inputs"][idx], layer.w, layer.stride, gz)
        conv_grads[idx] = (gw, gb)
    grads: list[np.ndarray] = []
    for gw, gb in conv_grads:
        grads.extend((gw, gb))
    grads.extend((g_fc_w, g_fc_b))
    return grads, gcur


def pcn_forward(pair: np.ndarray, model: PcnModel) -> MatchScore:
    """Score one (p, p, 2) pair tensor; deterministic for fixed weights."""
    pair = np.asarray(pair)
    if pair.ndim != 3:
        raise DimensionError(f"expected a (p, p, 2) pair tensor, got shape {pair.shape}")
    logits, _ = forward_batch(pair[None, ...], model)
    z = float(logits[0])
    return MatchScore(logit=z, c_s=float(sigmoid(np.array([z]))[0]))


_CHUNK = 8  # pairs per forward chunk; keeps conv activations cache-resident


def pcn_forward_batch(pairs: np.ndarray, model: PcnModel, threads: int = 1) -> np.ndarray:
    """Logits for a batch of pair tensors, processed in cache-sized chunks.

    Chunks run across a thread pool when threads > 1 (numpy releases the GIL
    inside the matmuls, so this is real parallelism). Worker count is capped at
    the machine's core count; results are concatenated in batch order.
    """
    pairs = np.ascontiguousarray(pairs, dtype=model.dtype)
    n = pairs.shape[0]
    if n <= _CHUNK:
        return forward_batch(pairs, model, keep_cache=False)[0]
    bounds = list(range(0, n, _CHUNK)) + [n]
    chunks = [pairs[bounds[i] : bounds[i + 1]] for i in range(len(bounds) - 1)]
    workers = min(threads, os.cpu_count() or 1, len(chunks))
    local = threading.local()  # per-thread activation buffers, reused across chunks

    def run(chunk: np.ndarray) -> np.ndarray:
        ws = getattr(local, "ws", None)
        if ws is None:
            ws = local.ws = {}
        return forward_batch(chunk, model, keep_cache=False, workspace=ws)[0]

    if workers <= 1:
        return np.concatenate([run(c) for c in chunks])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, chunks))
    return np.concatenate(results)


def build_pair(k_patch: np.ndarray, w_patch: np.ndarray) -> np.ndarray:
    """Stack std-normalized fingerprint (channel 0) and residual (channel 1) crops."""
    k = np.asarray(k_patch, dtype=np.float64)
    w = np.asarray(w_patch, dtype=np.float64)
    if k.shape != w.shape:
        raise DimensionError(f"fingerprint crop {k.shape} vs residual crop {w.shape}")
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DimensionError(f"pair tensors must be square 2-D, got {k.shape}")
    return np.stack([normalize_by_std(k), normalize_by_std(w)], axis=-1)


def build_pair_batch(k_patches, w_patch: np.ndarray, dtype=np.float32, out: np.ndarray | None = None) -> np.ndarray:
    """Pair tensors for one residual against many fingerprints.

    The residual is normalized once and broadcast into channel 1; each
    fingerprint crop is normalized per-crop (identical values to build_pair).
    `out` may supply a preallocated (n, p, p, 2) buffer for reuse.
    """
    w = np.asarray(w_patch, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DimensionError(f"pair tensors must be square 2-D, got {w.shape}")
    n = len(k_patches)
    shape = (n,) + w.shape + (2,)
    if out is None or out.shape != shape or out.dtype != dtype:
        out = np.empty(shape, dtype=dtype)
    out[..., 1] = normalize_by_std(w)
    for i, k in enumerate(k_patches):
        k = np.asarray(k, dtype=np.float64)
        if k.shape != w.shape:
            raise DimensionError(f"fingerprint crop {k.shape} vs residual crop {w.shape}")
        out[i, :, :, 0] = normalize_by_std(k)
    return out


# ---------------------------------------------------------------------------
# Persistence: magic "PCNW", u8 version, arch descriptor u32s, float32 blobs
# ---------------------------------------------------------------------------

def model_to_bytes(model: PcnModel) -> bytes:
    out = [MODEL_MAGIC, struct.pack("<B", MODEL_VERSION)]
    arch = model.arch
    out.append(struct.pack("<II", arch.in_channels, len(arch.convs)))
    for spec in arch.convs:
        out.append(struct.pack("<III", spec.out_channels, spec.kernel, spec.stride))
    out.append(struct.pack("<I", arch.pool_pairs))
    for layer in model.convs:
        out.append(np.ascontiguousarray(layer.w, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(layer.b, dtype="<f4").tobytes())
    out.append(np.ascontiguousarray(model.fc_w, dtype="<f4").tobytes())
    out.append(np.ascontiguousarray(model.fc_b, dtype="<f4").tobytes())
    return b"".join(out)


def model_from_bytes(data: bytes, origin: str = "<bytes>") -> PcnModel:
    if len(data) >= 4 and data[:4] != MODEL_MAGIC:
        raise FormatError(f"{origin}: bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}")
    if len(data) < 13:
        raise FormatError(f"{origin}: model file too short")
    version = data[4]
    if version != MODEL_VERSION:
        raise FormatError(f"{origin}: unsupported model version {version} (expected {MODEL_VERSION})")
    pos = 5
    in_channels, n_convs = struct.unpack_from("<II", data, pos)
    pos += 8
    if not 1 <= n_convs <= 64:
        raise FormatError(f"{origin}: implausible conv layer count {n_convs}")
    if len(data) < pos + 12 * n_convs + 4:
        raise FormatError(f"{origin}: truncated architecture descriptor")
    specs = []
    for _ in range(n_convs):
        out_ch, kernel, stride = struct.unpack_from("<III", data, pos)
        pos += 12
        specs.append(ConvSpec(out_ch, kernel, stride))
    (pool_pairs,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arch = PcnArch(in_channels=in_channels, convs=tuple(specs), pool_pairs=pool_pairs)

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal pos
        count = int(np.prod(shape))
        end = pos + count * 4
        if end > len(data):
            raise FormatError(f"{origin}: truncated parameter blob")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float32)
        pos = end
        return arr.reshape(shape)

    convs = []
    cin = arch.in_channels
    for spec in arch.convs:
        w = take((spec.kernel, spec.kernel, cin, spec.out_channels))
        b = take((spec.out_channels,))
        convs.append(ConvLayer(w=w, b=b, stride=spec.stride))
        cin = spec.out_channels
    fc_w = take((arch.pool_pairs,))
    fc_b = take((1,))
    if pos != len(data):
        raise FormatError(f"{origin}: trailing data after parameter blobs")
    return PcnModel(arch=arch, convs=convs, fc_w=fc_w, fc_b=fc_b)


def save_model(model: PcnModel, path) -> None:
    try:
        with open(path, "wb") as f:
            f.write(model_to_bytes(model))
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def load_model(path) -> PcnModel:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    return model_from_bytes(data, origin=str(path))
