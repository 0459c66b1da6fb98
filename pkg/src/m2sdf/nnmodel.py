"""Small trainable image-to-image CNN with verified gradients.

A plain residual conv net: ``depth`` same-padded conv layers (ReLU
between them), single-channel output head, and optionally the mean over
input channels added back, so a freshly built residual model is exactly
the per-pixel channel average. Everything is numpy; convolutions run as
im2col matrix products, which keeps training deterministic and lets the
backward pass be checked against central finite differences in double
precision.

Activations are channels-last (N, H, W, C). Weight tensors have shape
(k, k, C_in, C_out) and flatten to the (k*k*C_in, C_out) matmul form.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from m2sdf._rng import TAG_INIT, stream

__all__ = [
    "ModelConfig",
    "OptimizerConfig",
    "Model",
    "Optimizer",
    "TrainingError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "train_step",
    "mse_loss",
    "gradient_check",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"M2SD"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class CheckpointFormatError(ValueError):
    """Raised for files that are not valid checkpoints."""


class CheckpointVersionError(ValueError):
    """Raised for checkpoints written by a newer format version."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int
    hidden_channels: int = 16
    depth: int = 4
    kernel: int = 3
    residual: bool = True

    def __post_init__(self) -> None:
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.hidden_channels < 1:
            raise ValueError(f"hidden_channels must be >= 1, got {self.hidden_channels}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {self.kernel}")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    kind: str = "adam"
    batch_size: int = 8
    steps: int = 1000

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"kind must be 'sgd' or 'adam', got {self.kind!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


def _layer_channels(config: ModelConfig) -> list[tuple[int, int]]:
    chans = [config.in_channels] + [config.hidden_channels] * (config.depth - 1) + [1]
    return list(zip(chans[:-1], chans[1:]))


class Model:
    """Residual CNN instance: immutable config plus named parameter arrays."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        rng = stream(seed, TAG_INIT)
        k = config.kernel
        pairs = _layer_channels(config)
        for idx, (cin, cout) in enumerate(pairs):
            final = idx == len(pairs) - 1
            if final and config.residual:
                # Zero head: the untrained model is exactly the channel mean.
                w = np.zeros((k, k, cin, cout))
            else:
                bound = np.sqrt(6.0 / (k * k * cin))
                w = rng.uniform(-bound, bound, size=(k, k, cin, cout))
            self.params[f"conv{idx}.w"] = w.astype(self.dtype)
            self.params[f"conv{idx}.b"] = np.zeros(cout, dtype=self.dtype)

    @property
    def n_layers(self) -> int:
        return self.config.depth

    def forward(self, stack: np.ndarray) -> np.ndarray:
        """Run one stack (H, W, C) or (H, W) through the net; returns (H, W)."""
        x = np.asarray(stack, dtype=self.dtype)
        if x.ndim == 2:
            x = x[..., None]
        if x.ndim != 3 or x.shape[-1] != self.config.in_channels:
            raise ValueError(
                f"expected stack with {self.config.in_channels} channels, got shape {np.asarray(stack).shape}"
            )
        if min(x.shape[0], x.shape[1]) < self.config.kernel:
            raise ValueError(f"spatial dims {x.shape[:2]} smaller than kernel {self.config.kernel}")
        y, _ = self.forward_batch(x[None], want_cache=False)
        return y[0, :, :, 0]

    def forward_batch(self, x: np.ndarray, want_cache: bool = True):
        """Forward a batch (N, H, W, C) -> (N, H, W, 1) plus backward cache."""
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[-1] != self.config.in_channels:
            raise ValueError(f"expected batch (N, H, W, {self.config.in_channels}), got {x.shape}")
        k = self.config.kernel
        cache: list[tuple] = []
        h = x
        for idx in range(self.n_layers):
            w = self.params[f"conv{idx}.w"]
            b = self.params[f"conv{idx}.b"]
            cols, in_shape = _im2col(h, k)
            z = cols @ w.reshape(-1, w.shape[-1])
            z += b
            z = z.reshape(h.shape[0], h.shape[1], h.shape[2], -1)
            last = idx == self.n_layers - 1
            if not last:
                relu_mask = z > 0
                h = np.where(relu_mask, z, 0)
            else:
                relu_mask = None
                h = z
            if want_cache:
                cache.append((cols, in_shape, relu_mask))
            else:
                cache.append(None)
        if self.config.residual:
            h = h + x.mean(axis=3, keepdims=True, dtype=self.dtype)
        return h, cache

    def backward_batch(self, cache: list, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients for a forward_batch cache and output gradient."""
        k = self.config.kernel
        grads: dict[str, np.ndarray] = {}
        # Residual head adds the channel mean of the input, which holds no
        # parameters, so only the conv chain needs traversal.
        dh = np.ascontiguousarray(grad_out, dtype=self.dtype)
        for idx in range(self.n_layers - 1, -1, -1):
            cols, in_shape, relu_mask = cache[idx]
            if relu_mask is not None:
                dh = np.where(relu_mask, dh, 0)
            w = self.params[f"conv{idx}.w"]
            n, hh, ww, cout = dh.shape
            dyf = dh.reshape(n * hh * ww, cout)
            grads[f"conv{idx}.w"] = (cols.T @ dyf).reshape(w.shape)
            grads[f"conv{idx}.b"] = dyf.sum(axis=0)
            if idx > 0:
                # input gradient = correlation of dh with the 180deg-rotated,
                # channel-transposed kernel (transposed convolution)
                w_rot = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
                dcols, _ = _im2col(dh, k)
                cin = in_shape[-1]
                dh = (dcols @ w_rot.reshape(-1, cin)).reshape(in_shape)
        return grads


def _im2col(x: np.ndarray, k: int):
    """Flatten all k x k neighborhoods (zero same-padding) into a matrix.

    Returns cols of shape (N*H*W, k*k*C), rows in (n, i, j) scan order and
    columns in (ki, kj, c) order to match the flattened weight layout.
    """
    n, h, w, c = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    v = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, H, W, C, k, k)
    cols = v.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)
    return cols, x.shape


class Optimizer:
    """sgd or adam over a model's named parameters."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        lr = self.config.learning_rate
        self.t += 1
        if self.config.kind == "sgd":
            for name, p in params.items():
                p -= (lr * grads[name]).astype(p.dtype)
            return
        b1, b2, eps = 0.9, 0.999, 1e-8
        for name, p in params.items():
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every element, plus the gradient wrt pred."""
    pred64 = pred.astype(np.float64, copy=False)
    tgt64 = target.astype(np.float64, copy=False)
    diff = pred64 - tgt64
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype)


def train_step(
    model: Model,
    inputs: np.ndarray,
    targets: np.ndarray,
    opt: Optimizer,
    step: int | None = None,
) -> float:
    """One L2 update: forward, mean-squared loss, backward, optimizer step.

    Returns the pre-update loss. Raises TrainingError on a non-finite loss.
    """
    inputs = np.asarray(inputs, dtype=model.dtype)
    targets = np.asarray(targets, dtype=model.dtype)
    if inputs.ndim != 4 or inputs.shape[0] < 1:
        raise ValueError(f"inputs must be a nonempty batch (N, H, W, C), got {inputs.shape}")
    if targets.ndim == 3:
        targets = targets[..., None]
    if targets.shape != inputs.shape[:3] + (1,):
        raise ValueError(f"targets shape {targets.shape} does not match inputs {inputs.shape}")
    pred, cache = model.forward_batch(inputs)
    loss, grad = mse_loss(pred, targets)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}", step=step)
    grads = model.backward_batch(cache, grad)
    opt.step(model.params, grads)
    return loss


# ----------------------------------------------------------------------
# Gradient verification
# ----------------------------------------------------------------------

def gradient_check(
    config: ModelConfig,
    tolerance: float = 1e-3,
    seed: int = 0,
    fd_step: float = 1e-5,
    spatial: int = 8,
) -> float:
    """Max relative error of analytic L2-loss gradients vs central FD.

    Builds a double-precision instance with all parameters randomized
    (the zero head would otherwise hide upstream gradients), and compares
    every parameter's analytic gradient against (L(p+h) - L(p-h)) / 2h.
    Emits a warning when the error exceeds ``tolerance``.
    """
    model = Model(config, seed=seed, dtype=np.float64)
    rng = stream(seed, TAG_INIT, 0xFD)
    for name in model.params:
        model.params[name] = rng.uniform(-0.5, 0.5, size=model.params[name].shape)
    x = rng.uniform(0.0, 1.0, size=(2, spatial, spatial, config.in_channels))
    target = rng.uniform(0.0, 1.0, size=(2, spatial, spatial, 1))

    def loss_at() -> float:
        pred, _ = model.forward_batch(x, want_cache=False)
        return float(np.mean((pred - target) ** 2))

    pred, cache = model.forward_batch(x)
    _, grad_out = mse_loss(pred, target)
    analytic = model.backward_batch(cache, grad_out)

    max_rel = 0.0
    for name, p in model.params.items():
        flat = p.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            hi = loss_at()
            flat[i] = orig - fd_step
            lo = loss_at()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * fd_step)
            rel = abs(a_flat[i] - numeric) / max(abs(a_flat[i]) + abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    if max_rel > tolerance:
        warnings.warn(f"gradient check error {max_rel:.3e} exceeds tolerance {tolerance:.3e}", stacklevel=2)
    return max_rel


# ----------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------
#
# Layout (all integers little-endian u32):
#   bytes 0..3   magic "M2SD"
#   bytes 4..7   format version
#   bytes 8..11  metadata length L
#   L bytes      JSON metadata: {"config", "step", "optimizer" | null,
#                "rng_state" (hex)}
#   u32          tensor count
#   per tensor:  name length, name (utf-8), rank, dims..., float32 data
#
# Tensors appear in sorted-name order; optimizer moment tensors are
# prefixed "opt.m." / "opt.v.".


def save_checkpoint(
    model: Model,
    opt: Optimizer | None,
    path,
    step: int = 0,
    rng_state: bytes = b"",
) -> None:
    path = Path(path)
    meta = {
        "config": asdict(model.config),
        "step": int(step),
        "optimizer": None if opt is None else {**asdict(opt.config), "t": opt.t},
        "rng_state": rng_state.hex(),
    }
    tensors: dict[str, np.ndarray] = dict(model.params)
    if opt is not None:
        for name, m in opt._m.items():
            tensors[f"opt.m.{name}"] = m
        for name, v in opt._v.items():
            tensors[f"opt.v.{name}"] = v

    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4")
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<I", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<I", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()

    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[Model, Optimizer | None]:
    """Rebuild (model, optimizer) from a checkpoint file.

    Forward outputs of the loaded model are bit-identical to the saved one.
    """
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointFormatError(f"truncated checkpoint: {path}")
        out = view[pos : pos + n]
        pos += n
        return out

    def take_u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"not a checkpoint (bad magic): {path}")
    version = take_u32()
    if version > CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is newer than supported {CHECKPOINT_VERSION}")
    meta_len = take_u32()
    try:
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
        config = ModelConfig(**meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"bad checkpoint metadata in {path}: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    for _ in range(take_u32()):
        name = bytes(take(take_u32())).decode("utf-8")
        rank = take_u32()
        if rank > 8:
            raise CheckpointFormatError(f"implausible tensor rank {rank} in {path}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
        tensors[name] = np.array(data)  # own the memory

    model = Model(config, seed=0)
    for name, p in model.params.items():
        if name not in tensors:
            raise CheckpointFormatError(f"checkpoint missing tensor {name!r}: {path}")
        if tensors[name].shape != p.shape:
            raise CheckpointFormatError(
                f"tensor {name!r} shape {tensors[name].shape} does not match config {p.shape}"
            )
        model.params[name] = tensors[name]

    opt = None
    if meta.get("optimizer"):
        ometa = dict(meta["optimizer"])
        t = ometa.pop("t", 0)
        opt = Optimizer(OptimizerConfig(**ometa))
        opt.t = t
        for name in model.params:
            if f"opt.m.{name}" in tensors:
                opt._m[name] = tensors[f"opt.m.{name}"]
            if f"opt.v.{name}" in tensors:
                opt._v[name] = tensors[f"opt.v.{name}"]
    return model, opt
