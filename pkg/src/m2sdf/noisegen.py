"""Noise regimes and the synthetic sonar-phantom corpus generator.

Sigma and lambda are given in 8-bit-image convention: Gaussian sigma=25
means a standard deviation of 25/255 on the internal [0, 1] scale, and
Poisson noise is y = Poisson(lambda * x) / lambda, which makes
lambda -> infinity the noiseless limit. Speckle is a per-pixel
multiplicative Rayleigh factor.

All draws come from counter-based streams keyed by the spec seed, so
equal (input, spec) pairs produce bit-identical outputs regardless of
call order or threading.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from m2sdf import imagecore
from m2sdf._rng import TAG_NOISE, TAG_PHANTOM, stream

__all__ = [
    "NoiseSpec",
    "PhantomSpec",
    "PhantomError",
    "gaussian_fixed",
    "gaussian_range",
    "poisson_fixed",
    "poisson_range",
    "speckle",
    "unit_speckle",
    "parse_noise_label",
    "noise_label",
    "resolve_param",
    "add_gaussian",
    "add_poisson",
    "add_speckle",
    "apply_noise",
    "make_phantom",
    "make_corpus",
    "load_corpus",
]

GAUSSIAN_FIXED = "gaussian-fixed"
GAUSSIAN_RANGE = "gaussian-range"
POISSON_FIXED = "poisson-fixed"
POISSON_RANGE = "poisson-range"
SPECKLE = "speckle"

_KINDS = (GAUSSIAN_FIXED, GAUSSIAN_RANGE, POISSON_FIXED, POISSON_RANGE, SPECKLE)

# Rayleigh scale for which the multiplicative factor has mean exactly 1.
UNIT_SPECKLE_SCALE = math.sqrt(2.0 / math.pi)

MANIFEST_VERSION = 1


class PhantomError(RuntimeError):
    """Raised when phantom objects cannot be placed on the canvas."""


@dataclass(frozen=True)
class NoiseSpec:
    """One noise regime: kind, parameter (or range), and stream seed."""

    kind: str
    param1: float
    param2: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}, expected one of {_KINDS}")
        if self.param1 <= 0:
            raise ValueError(f"param1 must be > 0, got {self.param1}")
        if self.kind in (GAUSSIAN_RANGE, POISSON_RANGE):
            if self.param2 is None or not self.param1 < self.param2:
                raise ValueError(f"range kinds need 0 < param1 < param2, got ({self.param1}, {self.param2})")
        elif self.param2 is not None:
            raise ValueError(f"{self.kind} takes no param2")

    def with_seed(self, seed: int) -> "NoiseSpec":
        return NoiseSpec(self.kind, self.param1, self.param2, seed)


def gaussian_fixed(sigma: float, seed: int = 0) -> NoiseSpec:
    return NoiseSpec(GAUSSIAN_FIXED, sigma, None, seed)


def gaussian_range(lo: float, hi: float, seed: int = 0) -> NoiseSpec:
    return NoiseSpec(GAUSSIAN_RANGE, lo, hi, seed)


def poisson_fixed(lam: float, seed: int = 0) -> NoiseSpec:
    return NoiseSpec(POISSON_FIXED, lam, None, seed)


def poisson_range(lo: float, hi: float, seed: int = 0) -> NoiseSpec:
    return NoiseSpec(POISSON_RANGE, lo, hi, seed)


def speckle(scale: float, seed: int = 0) -> NoiseSpec:
    return NoiseSpec(SPECKLE, scale, None, seed)


def unit_speckle(seed: int = 0) -> NoiseSpec:
    """Speckle whose multiplicative factor has mean exactly 1."""
    return speckle(UNIT_SPECKLE_SCALE, seed)


# The four training-grid labels, plus generic speckle.
_LABELS = {
    "g25": lambda seed: gaussian_fixed(25.0, seed),
    "g5-50": lambda seed: gaussian_range(5.0, 50.0, seed),
    "p30": lambda seed: poisson_fixed(30.0, seed),
    "p5-50": lambda seed: poisson_range(5.0, 50.0, seed),
    "speckle": unit_speckle,
}

GRID_LABELS = ("g25", "g5-50", "p30", "p5-50")


def parse_noise_label(label: str, seed: int = 0) -> NoiseSpec:
    """Build the NoiseSpec for a short label like "g25" or "p5-50"."""
    try:
        return _LABELS[label](seed)
    except KeyError:
        raise ValueError(f"unknown noise label {label!r}, expected one of {sorted(_LABELS)}") from None


def noise_label(spec: NoiseSpec) -> str:
    """Short label for a spec, e.g. "g25", "p5-50", "sp0.80"."""
    def num(v: float) -> str:
        return f"{v:g}"

    if spec.kind == GAUSSIAN_FIXED:
        return f"g{num(spec.param1)}"
    if spec.kind == GAUSSIAN_RANGE:
        return f"g{num(spec.param1)}-{num(spec.param2)}"
    if spec.kind == POISSON_FIXED:
        return f"p{num(spec.param1)}"
    if spec.kind == POISSON_RANGE:
        return f"p{num(spec.param1)}-{num(spec.param2)}"
    return "speckle" if abs(spec.param1 - UNIT_SPECKLE_SCALE) < 1e-12 else f"sp{spec.param1:.2f}"


# ----------------------------------------------------------------------
# Noise synthesis
# ----------------------------------------------------------------------

def resolve_param(spec: NoiseSpec) -> float:
    """The concrete sigma/lambda/scale this spec instance draws.

    Fixed kinds return param1; range kinds draw uniformly from
    [param1, param2] on a stream keyed by the seed alone, so the draw is
    the same for every pixel of the image and depends only on the seed.
    """
    if spec.kind in (GAUSSIAN_RANGE, POISSON_RANGE):
        rng = stream(spec.seed, TAG_NOISE, 1)
        return float(rng.uniform(spec.param1, spec.param2))
    return float(spec.param1)


def _field_rng(spec: NoiseSpec) -> np.random.Generator:
    return stream(spec.seed, TAG_NOISE, 2)


def gaussian_noise_field(shape: tuple[int, int], sigma_8bit: float, spec: NoiseSpec) -> np.ndarray:
    """Pre-clamp additive noise field, std sigma_8bit/255, float64."""
    return _field_rng(spec).normal(0.0, sigma_8bit / 255.0, size=shape)


def poisson_counts(x: np.ndarray, lam: float, spec: NoiseSpec) -> np.ndarray:
    """Pre-clamp per-pixel counts Poisson(lambda * x), float64."""
    return _field_rng(spec).poisson(lam * np.asarray(x, dtype=np.float64)).astype(np.float64)


def rayleigh_field(shape: tuple[int, int], scale: float, spec: NoiseSpec) -> np.ndarray:
    """Pre-clamp multiplicative Rayleigh factors, float64."""
    return _field_rng(spec).rayleigh(scale, size=shape)


def add_gaussian(img: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    if spec.kind not in (GAUSSIAN_FIXED, GAUSSIAN_RANGE):
        raise ValueError(f"add_gaussian needs a gaussian spec, got kind {spec.kind!r}")
    sigma = resolve_param(spec)
    noisy = np.asarray(img, dtype=np.float64) + gaussian_noise_field(img.shape, sigma, spec)
    return imagecore.image(noisy, clamp=True)


def add_poisson(img: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    if spec.kind not in (POISSON_FIXED, POISSON_RANGE):
        raise ValueError(f"add_poisson needs a poisson spec, got kind {spec.kind!r}")
    lam = resolve_param(spec)
    noisy = poisson_counts(img, lam, spec) / lam
    return imagecore.image(noisy, clamp=True)


def add_speckle(img: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    if spec.kind != SPECKLE:
        raise ValueError(f"add_speckle needs a speckle spec, got kind {spec.kind!r}")
    noisy = np.asarray(img, dtype=np.float64) * rayleigh_field(img.shape, spec.param1, spec)
    return imagecore.image(noisy, clamp=True)


def apply_noise(img: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Dispatch to the matching noise model for the spec kind."""
    if spec.kind in (GAUSSIAN_FIXED, GAUSSIAN_RANGE):
        return add_gaussian(img, spec)
    if spec.kind in (POISSON_FIXED, POISSON_RANGE):
        return add_poisson(img, spec)
    return add_speckle(img, spec)


# ----------------------------------------------------------------------
# Phantom scenes
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    """Synthetic scene layout: canvas, object count, shadows, background."""

    height: int = 128
    width: int = 128
    object_count: int = 3
    shadow: bool = True
    background_level: float = 0.35
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"canvas dims must be >= 1, got {self.height}x{self.width}")
        if self.object_count < 0:
            raise ValueError(f"object_count must be >= 0, got {self.object_count}")
        if not 0.0 <= self.background_level <= 1.0:
            raise ValueError(f"background_level must be in [0, 1], got {self.background_level}")

    def with_seed(self, seed: int) -> "PhantomSpec":
        return PhantomSpec(self.height, self.width, self.object_count, self.shadow, self.background_level, seed)


_PLACEMENT_ATTEMPTS = 100


def make_phantom(spec: PhantomSpec) -> tuple[np.ndarray, list[tuple[int, int, int, int]]]:
    """Render one clean phantom scene.

    Background sits at background_level with a mild smooth gradient;
    each object is a bright convex shape (ellipse or rectangle) at least
    0.3 above background, with an adjacent dark shadow trailing on its
    right side when shadow is enabled. Returns the image and the object
    bounding boxes as (x, y, w, h).
    """
    rng = stream(spec.seed, TAG_PHANTOM)
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    gx, gy = rng.uniform(-1.0, 1.0, size=2)
    gradient = 0.04 * (gx * (xx / max(w - 1, 1) - 0.5) + gy * (yy / max(h - 1, 1) - 0.5))
    canvas = np.full((h, w), spec.background_level, dtype=np.float64) + gradient

    bg = spec.background_level
    boxes: list[tuple[int, int, int, int]] = []
    occupied: list[tuple[int, int, int, int]] = []  # x, y, w, h incl. shadow

    for _ in range(spec.object_count):
        placed = False
        for _attempt in range(_PLACEMENT_ATTEMPTS):
            ow = int(rng.integers(max(4, w // 12), max(6, w // 5) + 1))
            oh = int(rng.integers(max(4, h // 12), max(6, h // 5) + 1))
            sw = int(round(ow * 0.8)) if spec.shadow else 0  # shadow width
            if ow + sw >= w or oh >= h:
                continue
            x = int(rng.integers(0, w - ow - sw))
            y = int(rng.integers(0, h - oh))
            footprint = (x, y, ow + sw, oh)
            if any(_overlaps(footprint, o) for o in occupied):
                continue
            shape_kind = int(rng.integers(0, 2))
            brightness = min(bg + 0.3 + float(rng.uniform(0.0, 0.2)), 1.0)

            if spec.shadow:
                shade = max(bg - 0.25, 0.0)
                canvas[y : y + oh, x + ow : x + ow + sw] = shade
            if shape_kind == 0:  # ellipse
                cy, cx = y + (oh - 1) / 2.0, x + (ow - 1) / 2.0
                mask = ((yy - cy) / (oh / 2.0)) ** 2 + ((xx - cx) / (ow / 2.0)) ** 2 <= 1.0
                canvas[mask] = brightness
            else:  # rectangle
                canvas[y : y + oh, x : x + ow] = brightness

            boxes.append((x, y, ow, oh))
            occupied.append(footprint)
            placed = True
            break
        if not placed:
            raise PhantomError(
                f"could not place object {len(boxes) + 1}/{spec.object_count} on a "
                f"{h}x{w} canvas after {_PLACEMENT_ATTEMPTS} attempts"
            )

    return imagecore.image(canvas, clamp=True), boxes


def _overlaps(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def make_corpus(count: int, spec: PhantomSpec, out_dir) -> dict:
    """Write ``count`` clean phantoms (seed = spec.seed + index) plus a manifest.

    The manifest JSON lists file names, seeds, and object boxes; rerunning
    with the same arguments reproduces every byte.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for index in range(count):
        seed = spec.seed + index
        img, boxes = make_phantom(spec.with_seed(seed))
        name = f"phantom_{index:05d}.png"
        imagecore.save_image(img, out_dir / name)
        entries.append({"file": name, "seed": seed, "boxes": [list(b) for b in boxes]})
    manifest = {"version": MANIFEST_VERSION, "images": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_corpus(corpus_dir) -> tuple[list[np.ndarray], dict]:
    """Read back a corpus directory written by make_corpus."""
    corpus_dir = Path(corpus_dir)
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unrecognized corpus manifest version {manifest.get('version')!r}")
    images = [imagecore.load_image(corpus_dir / entry["file"]) for entry in manifest["images"]]
    return images, manifest
