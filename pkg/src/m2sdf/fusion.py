"""Multi-source fusion: build variant stacks and train them against each other.

One source image yields M variant frames (denoiser outputs, optionally
the raw noisy frame). Training re-partitions each sequence's frame
indices at every step into a disjoint input subset J and target subset K
with a seeded shuffle, stacks the J frames channel-wise, and regresses
the model output onto every K frame. Over many steps each frame serves
as input and as target equally often, which is what supervises the
fusion without clean labels.

Inference feeds M - k_target channels; when the sequence holds more
frames than the model takes, the output is the average over
k_target + 1 cyclic rotations of the frame order, so every frame enters
at least once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from m2sdf import imagecore, nnmodel
from m2sdf._rng import TAG_BATCH, TAG_SHUFFLE, stream
from m2sdf.denoisers import DenoiserHandle

__all__ = [
    "FusionSequence",
    "PartitionPlan",
    "FusionConfig",
    "build_sequence",
    "shuffle_partition",
    "mutual_loss",
    "train_m2sdf",
    "fuse",
    "save_sequence",
    "load_sequence",
]

SEQUENCE_INDEX_NAME = "sequence.json"


@dataclass
class FusionSequence:
    """The M variant frames of one source image, in canonical order."""

    source_id: int
    frames: list[np.ndarray]
    frame_names: list[str]
    include_noisy: bool = False

    def __post_init__(self) -> None:
        if len(self.frames) != len(self.frame_names):
            raise ValueError(f"{len(self.frames)} frames but {len(self.frame_names)} names")
        if len(set(self.frame_names)) != len(self.frame_names):
            raise ValueError(f"frame names must be unique, got {self.frame_names}")
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise ValueError(f"frames must share dimensions, got {sorted(shapes)}")

    @property
    def m(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class PartitionPlan:
    """One step's disjoint (input, target) frame index split for a sequence."""

    step: int
    sequence_id: int
    inputs: tuple[int, ...]
    targets: tuple[int, ...]


@dataclass(frozen=True)
class FusionConfig:
    m: int
    k_target: int = 1
    model: nnmodel.ModelConfig | None = None
    opt: nnmodel.OptimizerConfig = field(default_factory=nnmodel.OptimizerConfig)
    shuffle_seed: int = 0
    patch_size: int | None = 64

    def __post_init__(self) -> None:
        if not 1 <= self.k_target <= self.m - 1:
            raise ValueError(f"k_target must be in [1, m-1={self.m - 1}], got {self.k_target}")
        if self.model is not None and self.model.in_channels != self.m - self.k_target:
            raise ValueError(
                f"model takes {self.model.in_channels} channels but m - k_target = {self.m - self.k_target}"
            )
        if self.patch_size is not None and self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1 or None, got {self.patch_size}")

    def model_config(self) -> nnmodel.ModelConfig:
        return self.model or nnmodel.ModelConfig(in_channels=self.m - self.k_target)


def build_sequence(
    noisy: np.ndarray,
    handles: list[DenoiserHandle],
    include_noisy: bool = False,
    source_id: int = 0,
) -> FusionSequence:
    """Run every denoiser on one noisy image and stack the variants.

    Frames follow registry-name order; with include_noisy the raw frame
    is prepended under the name "noisy".
    """
    if not handles:
        raise ValueError("need at least one denoiser handle")
    frames: list[np.ndarray] = []
    names: list[str] = []
    if include_noisy:
        frames.append(imagecore.image(noisy))
        names.append("noisy")
    for handle in sorted(handles, key=lambda h: h.name):
        try:
            frames.append(handle.apply(noisy))
        except Exception as exc:
            raise RuntimeError(f"denoiser {handle.name!r} failed on source {source_id}: {exc}") from exc
        names.append(handle.name)
    return FusionSequence(source_id=source_id, frames=frames, frame_names=names, include_noisy=include_noisy)


def shuffle_partition(m: int, k_target: int, seed: int, step: int, sequence_id: int) -> PartitionPlan:
    """Uniform disjoint split of {0..m-1} keyed by (seed, step, sequence_id).

    The first m - k_target indices of a seeded permutation become the
    input subset, the remainder the target subset; both are returned in
    ascending order (channel stacking is canonical, not permutation
    order).
    """
    if not 1 <= k_target <= m - 1:
        raise ValueError(f"k_target must be in [1, m-1={m - 1}], got {k_target}")
    perm = stream(seed, TAG_SHUFFLE, step, sequence_id).permutation(m)
    inputs = tuple(sorted(int(i) for i in perm[: m - k_target]))
    targets = tuple(sorted(int(i) for i in perm[m - k_target :]))
    return PartitionPlan(step=step, sequence_id=sequence_id, inputs=inputs, targets=targets)


def mutual_loss(prediction: np.ndarray, targets: list[np.ndarray]) -> float:
    """Mean over target frames of the per-pixel squared error."""
    if not targets:
        raise ValueError("need at least one target frame")
    pred = np.asarray(prediction, dtype=np.float64)
    total = 0.0
    for t in targets:
        t = np.asarray(t, dtype=np.float64)
        if t.shape != pred.shape:
            raise ValueError(f"target shape {t.shape} does not match prediction {pred.shape}")
        total += float(np.mean((pred - t) ** 2))
    return total / len(targets)


def _crop_origin(shape: tuple[int, int], patch: int, rng: np.random.Generator) -> tuple[int, int]:
    top = int(rng.integers(0, shape[0] - patch + 1))
    left = int(rng.integers(0, shape[1] - patch + 1))
    return top, left


def train_m2sdf(
    corpus: list,
    config: FusionConfig,
    loss_history: list | None = None,
) -> nnmodel.Model:
    """Train the fusion model by randomized mutual supervision.

    ``corpus`` holds FusionSequence values or paths to materialized
    sequence directories. Each step draws a batch of sequences, splits
    every sequence's frames with a fresh seeded partition, stacks the
    input frames in ascending frame order, and applies one optimizer
    update on the mean per-target squared error. Fully deterministic
    given (config, corpus order).
    """
    sequences = [load_sequence(c) if isinstance(c, (str, Path)) else c for c in corpus]
    if not sequences:
        raise ValueError("corpus is empty")
    for seq in sequences:
        if seq.m != config.m:
            raise ValueError(f"sequence {seq.source_id} has {seq.m} frames, config expects {config.m}")

    m, k = config.m, config.k_target
    model = nnmodel.Model(config.model_config(), seed=config.shuffle_seed)
    optimizer = nnmodel.Optimizer(config.opt)
    n_batch = config.opt.batch_size

    for step in range(config.opt.steps):
        rng = stream(config.shuffle_seed, TAG_BATCH, step)
        chosen = rng.integers(0, len(sequences), size=n_batch)
        stacks, target_sets = [], []
        for i in chosen:
            seq = sequences[int(i)]
            plan = shuffle_partition(m, k, config.shuffle_seed, step, seq.source_id)
            assert not set(plan.inputs) & set(plan.targets)
            assert sorted(plan.inputs + plan.targets) == list(range(m))
            h, w = seq.frames[0].shape
            patch = min(config.patch_size or max(h, w), h, w)
            top, left = _crop_origin((h, w), patch, rng)
            window = np.s_[top : top + patch, left : left + patch]
            stacks.append(np.stack([seq.frames[j][window] for j in plan.inputs], axis=-1))
            target_sets.append(np.stack([seq.frames[j][window] for j in plan.targets]))
        inputs = np.stack(stacks)  # (N, p, p, m-k)
        targets = np.stack(target_sets)  # (N, k, p, p)

        pred, cache = model.forward_batch(inputs)
        diff = pred.astype(np.float64)[:, None, :, :, 0] - targets  # (N, k, p, p)
        loss = float(np.mean(diff * diff))
        if not np.isfinite(loss):
            raise nnmodel.TrainingError(f"non-finite loss {loss}", step=step)
        if loss_history is not None:
            loss_history.append(loss)
        grad = (2.0 / diff.size) * diff.sum(axis=1)[..., None]
        grads = model.backward_batch(cache, grad.astype(model.dtype))
        optimizer.step(model.params, grads)

    return model


def fuse(model: nnmodel.Model, sequence: FusionSequence, k_target: int = 1) -> np.ndarray:
    """Fused inference over one sequence, clamped to [0, 1].

    With k_target = 0 every frame feeds the model once. Otherwise the
    model sees k_target + 1 rotations of the canonical frame order, each
    dropping a different cyclic run of k_target frames, and the outputs
    are averaged.
    """
    m = sequence.m
    c = model.config.in_channels
    if k_target < 0 or m - k_target != c:
        raise ValueError(f"model takes {c} channels but sequence has {m} frames with k_target={k_target}")
    acc = None
    for r in range(k_target + 1):
        subset = sorted((r + i) % m for i in range(c))
        stack = np.stack([sequence.frames[j] for j in subset], axis=-1)
        out = model.forward(stack).astype(np.float64)
        acc = out if acc is None else acc + out
    return imagecore.image(acc / (k_target + 1), clamp=True)


# ----------------------------------------------------------------------
# Materialized sequences
# ----------------------------------------------------------------------

def save_sequence(seq: FusionSequence, out_dir) -> Path:
    """Write a sequence as PNG frames plus a JSON index; returns the index path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (frame, name) in enumerate(zip(seq.frames, seq.frame_names)):
        fname = f"frame_{i:02d}.png"
        imagecore.save_image(frame, out_dir / fname)
        entries.append({"name": name, "file": fname})
    index = {"source_id": seq.source_id, "frames": entries, "include_noisy": seq.include_noisy}
    path = out_dir / SEQUENCE_INDEX_NAME
    path.write_text(json.dumps(index, indent=2) + "\n")
    return path


def load_sequence(seq_dir) -> FusionSequence:
    seq_dir = Path(seq_dir)
    index = json.loads((seq_dir / SEQUENCE_INDEX_NAME).read_text())
    frames = [imagecore.load_image(seq_dir / e["file"]) for e in index["frames"]]
    names = [e["name"] for e in index["frames"]]
    return FusionSequence(
        source_id=int(index["source_id"]),
        frames=frames,
        frame_names=names,
        include_noisy=bool(index.get("include_noisy", False)),
    )
