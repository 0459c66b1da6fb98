"""Registry of named single-frame denoisers.

Three families live here:

* classical baselines (median, gaussian) delegating to scipy.ndimage;
* self-supervised trainers producing CNN denoisers from noisy images
  alone — a neighbor-subsampling trainer with a regularized pair
  objective, and a masked-volume blind-spot trainer with a re-visible
  term;
* a log-domain wrapper that turns any denoiser into a multiplicative-
  speckle denoiser by filtering log intensities.

Every registered handle's ``apply`` preserves spatial dimensions and
clamps its output to [0, 1]. Handles also expose the unclamped ``fn``
so the log wrapper can compose in a domain where values are negative.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from m2sdf import imagecore, nnmodel, noisegen
from m2sdf._rng import TAG_BATCH, TAG_SUBSAMPLE, stream

__all__ = [
    "DenoiserHandle",
    "Registry",
    "RegistrationError",
    "SubsamplePair",
    "MaskedVolume",
    "register",
    "get",
    "list_names",
    "median_filter",
    "gaussian_filter",
    "median_handle",
    "gaussian_handle",
    "identity_handle",
    "n2n_subsample",
    "train_n2n",
    "b2u_mask_volume",
    "b2u_remap",
    "train_b2u",
    "log_domain_wrap",
    "save_handle",
    "load_handle",
]

LOG_EPS = 1e-3


class RegistrationError(ValueError):
    """Raised when a handle name is registered twice."""


@dataclass
class DenoiserHandle:
    """A named single-frame denoiser.

    ``fn`` is the raw callable (may return out-of-range values); ``apply``
    wraps it with the [0, 1] clamp every consumer relies on.
    """

    name: str
    kind: str  # classical | trained | wrapper
    fn: Callable[[np.ndarray], np.ndarray]
    provenance: dict = field(default_factory=dict)
    model: nnmodel.Model | None = None

    def apply(self, img: np.ndarray) -> np.ndarray:
        out = self.fn(np.asarray(img))
        if out.shape != np.asarray(img).shape:
            raise ValueError(f"denoiser {self.name!r} changed dimensions: {np.asarray(img).shape} -> {out.shape}")
        return imagecore.image(out, clamp=True)


class Registry:
    def __init__(self) -> None:
        self._handles: dict[str, DenoiserHandle] = {}

    def register(self, handle: DenoiserHandle) -> DenoiserHandle:
        if handle.name in self._handles:
            raise RegistrationError(f"denoiser {handle.name!r} already registered")
        self._handles[handle.name] = handle
        return handle

    def get(self, name: str) -> DenoiserHandle:
        try:
            return self._handles[name]
        except KeyError:
            raise KeyError(f"no denoiser named {name!r}; known: {self.list_names()}") from None

    def list_names(self) -> list[str]:
        return sorted(self._handles)


_default_registry = Registry()


def register(handle: DenoiserHandle) -> DenoiserHandle:
    return _default_registry.register(handle)


def get(name: str) -> DenoiserHandle:
    return _default_registry.get(name)


def list_names() -> list[str]:
    return _default_registry.list_names()


# ----------------------------------------------------------------------
# Classical baselines
# ----------------------------------------------------------------------

def median_filter(img: np.ndarray, radius: int = 1) -> np.ndarray:
    """Window median over (2r+1)^2 neighborhoods with edge replication."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    return ndimage.median_filter(np.asarray(img), size=2 * radius + 1, mode="nearest").astype(np.float32)


def gaussian_filter(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3*sigma), edge replication."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    radius = int(np.ceil(3.0 * sigma))
    out = ndimage.gaussian_filter(np.asarray(img, dtype=np.float64), sigma=sigma, mode="nearest", radius=radius)
    return out.astype(np.float32)


def median_handle(radius: int = 1) -> DenoiserHandle:
    return DenoiserHandle(
        name=f"median{2 * radius + 1}",
        kind="classical",
        fn=lambda img: median_filter(img, radius),
        provenance={"filter": "median", "radius": radius},
    )


def gaussian_handle(sigma: float = 1.0) -> DenoiserHandle:
    return DenoiserHandle(
        name=f"gauss{sigma:g}",
        kind="classical",
        fn=lambda img: gaussian_filter(img, sigma),
        provenance={"filter": "gaussian", "sigma": sigma},
    )


def identity_handle(name: str = "identity") -> DenoiserHandle:
    return DenoiserHandle(name=name, kind="classical", fn=lambda img: np.asarray(img, dtype=np.float32))


# ----------------------------------------------------------------------
# Neighbor subsampling
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SubsamplePair:
    """Two half-resolution siblings taking distinct positions per 2x2 cell.

    ``pos1``/``pos2`` record the chosen cell positions (0..3 in row-major
    cell order) so the same assignment can be replayed on another image.
    """

    sub1: np.ndarray
    sub2: np.ndarray
    pos1: np.ndarray
    pos2: np.ndarray

    def replay(self, img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Extract the same two sub-images from another same-shape image."""
        cells = _cell_view(np.asarray(img))
        s1 = np.take_along_axis(cells, self.pos1[..., None], axis=2)[..., 0]
        s2 = np.take_along_axis(cells, self.pos2[..., None], axis=2)[..., 0]
        return s1, s2


def _cell_view(img: np.ndarray) -> np.ndarray:
    """(H, W) -> (H//2, W//2, 4) of 2x2 cell values; trailing odd row/col dropped."""
    h2, w2 = img.shape[0] // 2, img.shape[1] // 2
    v = img[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).transpose(0, 2, 1, 3)
    return v.reshape(h2, w2, 4)


def n2n_subsample(img: np.ndarray, seed: int) -> SubsamplePair:
    """Split an image into a pseudo noisy pair by random neighbor picks.

    Each 2x2 cell contributes two distinct positions, one per sub-image,
    drawn uniformly over the 12 ordered position pairs.
    """
    img = np.asarray(img)
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError(f"image must be at least 2x2, got {img.shape}")
    h2, w2 = img.shape[0] // 2, img.shape[1] // 2
    rng = stream(seed, TAG_SUBSAMPLE)
    pos1 = rng.integers(0, 4, size=(h2, w2))
    pos2 = (pos1 + 1 + rng.integers(0, 3, size=(h2, w2))) % 4
    cells = _cell_view(img)
    s1 = np.take_along_axis(cells, pos1[..., None], axis=2)[..., 0]
    s2 = np.take_along_axis(cells, pos2[..., None], axis=2)[..., 0]
    return SubsamplePair(sub1=s1, sub2=s2, pos1=pos1, pos2=pos2)


def _pick_patches(
    corpus: list[np.ndarray], patch: int, rng: np.random.Generator, count: int
) -> np.ndarray:
    """Stack ``count`` seeded random crops drawn across the corpus."""
    idx = rng.integers(0, len(corpus), size=count)
    out = np.empty((count, patch, patch), dtype=np.float32)
    for n, i in enumerate(idx):
        img = corpus[i]
        top = int(rng.integers(0, img.shape[0] - patch + 1))
        left = int(rng.integers(0, img.shape[1] - patch + 1))
        out[n] = img[top : top + patch, left : left + patch]
    return out


def train_n2n(
    corpus: list[np.ndarray],
    noise: noisegen.NoiseSpec,
    gamma: float = 2.0,
    opt: nnmodel.OptimizerConfig | None = None,
    seed: int = 0,
    patch_size: int = 64,
    loss_history: list | None = None,
) -> DenoiserHandle:
    """Train a denoiser from noisy images via regularized neighbor pairs.

    Per step, each noisy patch is split into a sub-image pair; the model
    maps sub1 toward sub2, and a correction term weighted by ``gamma``
    penalizes deviation from the pair difference of the denoised full
    patch (evaluated without gradient). Returns a handle named
    "n2n-<noise label>".
    """
    if not corpus:
        raise ValueError("corpus is empty")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    opt_cfg = opt or nnmodel.OptimizerConfig()
    patch = min(patch_size, min(min(i.shape) for i in corpus))
    model = nnmodel.Model(nnmodel.ModelConfig(in_channels=1), seed=seed)
    optimizer = nnmodel.Optimizer(opt_cfg)

    for step in range(opt_cfg.steps):
        rng = stream(seed, TAG_BATCH, step)
        batch = _pick_patches(corpus, patch, rng, opt_cfg.batch_size)
        pairs = [n2n_subsample(batch[n], seed=int(rng.integers(0, 2**63))) for n in range(len(batch))]
        sub1 = np.stack([p.sub1 for p in pairs])[..., None]
        sub2 = np.stack([p.sub2 for p in pairs])[..., None]

        pred, cache = model.forward_batch(sub1)
        base_diff = pred.astype(np.float64) - sub2
        if gamma > 0.0:
            full_out, _ = model.forward_batch(batch[..., None], want_cache=False)
            replayed = [p.replay(full_out[n, :, :, 0]) for n, p in enumerate(pairs)]
            g1 = np.stack([r[0] for r in replayed])[..., None]
            g2 = np.stack([r[1] for r in replayed])[..., None]
            reg_diff = base_diff - (g1.astype(np.float64) - g2.astype(np.float64))
        else:
            reg_diff = np.zeros_like(base_diff)
        loss = float(np.mean(base_diff**2) + gamma * np.mean(reg_diff**2))
        if not np.isfinite(loss):
            raise nnmodel.TrainingError(f"non-finite loss {loss}", step=step)
        if loss_history is not None:
            loss_history.append(loss)
        grad = (2.0 / base_diff.size) * (base_diff + gamma * reg_diff)
        grads = model.backward_batch(cache, grad.astype(model.dtype))
        optimizer.step(model.params, grads)

    name = f"n2n-{noisegen.noise_label(noise)}"
    return _trained_handle(name, model, method="n2n", noise=noise, seed=seed, gamma=gamma, opt=opt_cfg)


# ----------------------------------------------------------------------
# Masked-volume blind-spot
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class MaskedVolume:
    """Four copies of an image, each masking one 2x2 cell position.

    ``index_map[i, j]`` names the copy in which pixel (i, j) is masked;
    masked pixels hold the mean of their edge-replicated 4-neighbors, so
    a copy's value at its masked pixels never depends on those pixels.
    """

    copies: np.ndarray  # (4, H, W)
    index_map: np.ndarray  # (H, W) in {0, 1, 2, 3}


def _neighbor_mean(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    return (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]) / 4.0


def mask_index_map(shape: tuple[int, int]) -> np.ndarray:
    ii, jj = np.indices(shape)
    return (2 * (ii % 2) + (jj % 2)).astype(np.int8)


def b2u_mask_volume(img: np.ndarray) -> MaskedVolume:
    """Build the 4-copy masked volume for blind-spot training.

    Odd dimensions are padded by replication to even, masked, then
    cropped back, so the returned copies match the input shape.
    """
    img = np.asarray(img)
    h, w = img.shape
    pad_h, pad_w = h % 2, w % 2
    work = np.pad(img, ((0, pad_h), (0, pad_w)), mode="edge") if (pad_h or pad_w) else img
    nm = _neighbor_mean(work)
    idx = mask_index_map(work.shape)
    copies = np.where((idx[None] == np.arange(4)[:, None, None]), nm[None], work[None])
    return MaskedVolume(
        copies=copies[:, :h, :w].astype(img.dtype, copy=False),
        index_map=idx[:h, :w],
    )


def b2u_remap(volume_outputs: np.ndarray, index_map: np.ndarray) -> np.ndarray:
    """Gather each pixel's prediction from the copy in which it was masked."""
    outputs = np.asarray(volume_outputs)
    if outputs.shape != (4,) + index_map.shape:
        raise ValueError(f"expected outputs (4, {index_map.shape[0]}, {index_map.shape[1]}), got {outputs.shape}")
    return np.choose(index_map, outputs)


def train_b2u(
    corpus: list[np.ndarray],
    noise: noisegen.NoiseSpec,
    lambda_vis: float = 1.0,
    opt: nnmodel.OptimizerConfig | None = None,
    seed: int = 0,
    patch_size: int = 64,
    loss_history: list | None = None,
) -> DenoiserHandle:
    """Train a blind-spot denoiser with a fixed-weight re-visible term.

    The blind branch reconstructs each pixel from the masked-volume copy
    that hid it; the visible branch regresses the plain forward pass onto
    the detached blind reconstruction with weight ``lambda_vis``. Returns
    a handle named "b2u-<noise label>".
    """
    if not corpus:
        raise ValueError("corpus is empty")
    if lambda_vis < 0:
        raise ValueError(f"lambda_vis must be >= 0, got {lambda_vis}")
    opt_cfg = opt or nnmodel.OptimizerConfig()
    patch = min(patch_size, min(min(i.shape) for i in corpus))
    patch -= patch % 2  # masking works on whole 2x2 cells
    model = nnmodel.Model(nnmodel.ModelConfig(in_channels=1), seed=seed)
    optimizer = nnmodel.Optimizer(opt_cfg)
    idx_map = None

    for step in range(opt_cfg.steps):
        rng = stream(seed, TAG_BATCH, step)
        batch = _pick_patches(corpus, patch, rng, opt_cfg.batch_size)
        n, h, w = batch.shape
        if idx_map is None:
            idx_map = mask_index_map((h, w))
        # batched equivalent of b2u_mask_volume (dims are even here)
        padded = np.pad(batch, ((0, 0), (1, 1), (1, 1)), mode="edge")
        nm = (padded[:, :-2, 1:-1] + padded[:, 2:, 1:-1] + padded[:, 1:-1, :-2] + padded[:, 1:-1, 2:]) / 4.0
        masked = idx_map[None, None] == np.arange(4)[None, :, None, None]
        volumes = np.where(masked, nm[:, None], batch[:, None])  # (N, 4, H, W)

        # one forward over [4 masked copies per sample] + [the plain samples]
        stacked = np.concatenate([volumes.reshape(n * 4, h, w), batch], axis=0)[..., None]
        pred, cache = model.forward_batch(stacked)
        vol_pred = pred[: n * 4, :, :, 0].reshape(n, 4, h, w).astype(np.float64)
        vis_pred = pred[n * 4 :, :, :, 0].astype(np.float64)

        blind = np.take_along_axis(vol_pred, idx_map[None, None].astype(np.int64), axis=1)[:, 0]
        blind_diff = blind - batch
        vis_diff = vis_pred - blind  # blind branch detached here
        loss = float(np.mean(blind_diff**2) + lambda_vis * np.mean(vis_diff**2))
        if not np.isfinite(loss):
            raise nnmodel.TrainingError(f"non-finite loss {loss}", step=step)
        if loss_history is not None:
            loss_history.append(loss)

        d_blind = (2.0 / blind_diff.size) * blind_diff
        d_vol = np.zeros_like(vol_pred)
        np.put_along_axis(d_vol, idx_map[None, None].astype(np.int64), d_blind[:, None], axis=1)
        d_vis = lambda_vis * (2.0 / vis_diff.size) * vis_diff
        grad_out = np.concatenate([d_vol.reshape(n * 4, h, w), d_vis], axis=0)[..., None]
        grads = model.backward_batch(cache, grad_out.astype(model.dtype))
        optimizer.step(model.params, grads)

    name = f"b2u-{noisegen.noise_label(noise)}"
    return _trained_handle(name, model, method="b2u", noise=noise, seed=seed, lambda_vis=lambda_vis, opt=opt_cfg)


# ----------------------------------------------------------------------
# Log-domain wrapper and persistence
# ----------------------------------------------------------------------

def log_domain_wrap(inner: DenoiserHandle) -> DenoiserHandle:
    """Lift a denoiser to multiplicative noise via log-domain filtering.

    apply(x) = exp(inner_fn(log(x + eps))) - eps, clamped to [0, 1]. The
    inner denoiser runs unclamped because log intensities are negative.
    """

    def fn(img: np.ndarray) -> np.ndarray:
        logged = np.log(np.asarray(img, dtype=np.float64) + LOG_EPS)
        return np.exp(np.asarray(inner.fn(logged.astype(np.float32)), dtype=np.float64)) - LOG_EPS

    return DenoiserHandle(
        name=f"log:{inner.name}",
        kind="wrapper",
        fn=fn,
        provenance={"wrapped": inner.name},
        model=inner.model,
    )


def _trained_handle(name: str, model: nnmodel.Model, **provenance) -> DenoiserHandle:
    def fn(img: np.ndarray) -> np.ndarray:
        return model.forward(np.asarray(img, dtype=np.float32))

    prov = dict(provenance)
    if "noise" in prov:
        prov["noise"] = dataclasses.asdict(prov["noise"])
    if "opt" in prov:
        prov["opt"] = dataclasses.asdict(prov["opt"])
    return DenoiserHandle(name=name, kind="trained", fn=fn, provenance=prov, model=model)


def save_handle(handle: DenoiserHandle, out_dir) -> Path:
    """Persist a trained handle as checkpoint + JSON sidecar; returns sidecar path."""
    if handle.model is None:
        raise ValueError(f"handle {handle.name!r} has no model to save")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_name = f"{handle.name}.ckpt"
    nnmodel.save_checkpoint(handle.model, None, out_dir / ckpt_name)
    sidecar = {
        "name": handle.name,
        "kind": handle.kind,
        "provenance": handle.provenance,
        "checkpoint": ckpt_name,
    }
    sidecar_path = out_dir / f"{handle.name}.json"
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return sidecar_path


def load_handle(sidecar_path) -> DenoiserHandle:
    sidecar_path = Path(sidecar_path)
    meta = json.loads(sidecar_path.read_text())
    model, _ = nnmodel.load_checkpoint(sidecar_path.parent / meta["checkpoint"])

    def fn(img: np.ndarray) -> np.ndarray:
        return model.forward(np.asarray(img, dtype=np.float32))

    return DenoiserHandle(
        name=meta["name"], kind=meta["kind"], fn=fn, provenance=meta.get("provenance", {}), model=model
    )
