"""Image representation, file I/O, patch extraction, and quality metrics.

An image is a 2-D float32 numpy array with every intensity finite and in
[0, 1]. Construction (``image``) is the only place values are clamped;
the metrics refuse out-of-contract inputs instead of fixing them up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "FormatError",
    "PatchSpec",
    "image",
    "load_image",
    "save_image",
    "to_patches",
    "tile_patches",
    "psnr",
    "ssim",
]

PSNR_CAP_DB = 100.0

# Rec. 601 luma weights used to collapse color inputs to grayscale.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)

# Standard SSIM constants on the [0, 1] intensity scale.
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2
_SSIM_WINDOW = 8


class FormatError(ValueError):
    """Raised for image files in a format this library does not read."""


def image(data, clamp: bool = False) -> np.ndarray:
    """Validate ``data`` as an image array (2-D float32 in [0, 1]).

    With ``clamp=True``, finite out-of-range values are clamped instead of
    rejected; non-finite values are always an error.
    """
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"image must be 2-D with positive dims, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if clamp:
        arr = np.clip(arr, 0.0, 1.0)
    elif arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image intensities outside [0, 1]; pass clamp=True to clamp")
    return arr


def _check_image(arr: np.ndarray, name: str = "image") -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class PatchSpec:
    """Square sliding-grid patch layout: ``size`` pixels with ``stride``."""

    size: int
    stride: int

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValueError(f"patch size must be >= 1, got {self.size}")
        if not 1 <= self.stride <= self.size:
            raise ValueError(f"stride must be in [1, size={self.size}], got {self.stride}")


# ----------------------------------------------------------------------
# File I/O
# ----------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Load a grayscale image, scaled to [0, 1] by the format's max value.

    Accepts 8/16-bit grayscale PNG and binary PGM (P5); color PNGs are
    collapsed by 0.299/0.587/0.114 luma weighting.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image file: {path}")
    head = path.open("rb").read(2)
    if head == b"P5":
        return _load_pgm(path)
    return _load_png(path)


def _load_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    # Header: "P5" <ws> width <ws> height <ws> maxval <single ws> raster.
    # '#' starts a comment running to end of line.
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"truncated PGM header in {path}")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"bad PGM dimensions/maxval in {path}: {width}x{height}, max {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    if len(raw) - pos < count * dtype.itemsize:
        raise FormatError(f"truncated PGM raster in {path}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    arr = data.reshape(height, width).astype(np.float64) / float(maxval)
    return image(arr, clamp=True)


def _load_png(path: Path) -> np.ndarray:
    try:
        with PILImage.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("RGB", "RGBA"):
                rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
                arr = rgb @ _LUMA
                maxval = 255.0
            elif mode == "LA":
                arr = np.asarray(img.getchannel("L"), dtype=np.float64)
                maxval = 255.0
            elif mode == "L":
                arr = np.asarray(img, dtype=np.float64)
                maxval = 255.0
            elif mode in ("I", "I;16", "I;16B"):
                arr = np.asarray(img, dtype=np.float64)
                maxval = 65535.0
            else:
                raise FormatError(f"unsupported image mode {mode!r} in {path}")
    except FormatError:
        raise
    except PILImage.UnidentifiedImageError as exc:
        raise FormatError(f"unrecognized image format: {path}") from exc
    return image(arr / maxval, clamp=True)


def save_image(img: np.ndarray, path) -> None:
    """Write ``img`` as 8-bit grayscale PNG; byte = round-half-up(v * 255)."""
    img = _check_image(img)
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    # floor(x + 0.5) is round-half-up, deterministic across platforms
    # (np.round would round half to even).
    quantized = np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5)
    data = np.clip(quantized, 0, 255).astype(np.uint8)
    PILImage.fromarray(data, mode="L").save(path, format="PNG")


# ----------------------------------------------------------------------
# Patches
# ----------------------------------------------------------------------

def to_patches(img: np.ndarray, spec: PatchSpec) -> list[np.ndarray]:
    """Extract square patches in row-major scan order.

    Trailing pixels not covered by a full patch are dropped; the count is
    floor((H - size)/stride + 1) * floor((W - size)/stride + 1).
    """
    img = _check_image(img)
    h, w = img.shape
    if spec.size > min(h, w):
        raise ValueError(f"patch size {spec.size} exceeds image dims {img.shape}")
    rows = (h - spec.size) // spec.stride + 1
    cols = (w - spec.size) // spec.stride + 1
    patches = []
    for r in range(rows):
        for c in range(cols):
            i, j = r * spec.stride, c * spec.stride
            patches.append(img[i : i + spec.size, j : j + spec.size].copy())
    return patches


def tile_patches(patches: list[np.ndarray], rows: int, cols: int) -> np.ndarray:
    """Reassemble non-overlapping patches from a stride == size scan."""
    if len(patches) != rows * cols:
        raise ValueError(f"expected {rows * cols} patches, got {len(patches)}")
    bands = [np.hstack(patches[r * cols : (r + 1) * cols]) for r in range(rows)]
    return np.vstack(bands)


# ----------------------------------------------------------------------
# Full-reference metrics
# ----------------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on the [0, 1] scale.

    Identical images return the 100 dB cap rather than infinity, keeping
    report tables finite and sortable.
    """
    a, b = _check_image(a, "a"), _check_image(b, "b")
    _check_same_shape(a, b)
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _box_sums(arr: np.ndarray, size: int) -> np.ndarray:
    """Sums over all size x size sliding windows via a padded 2-D cumsum."""
    s = np.zeros((arr.shape[0] + 1, arr.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(arr, axis=0), axis=1, out=s[1:, 1:])
    return s[size:, size:] - s[:-size, size:] - s[size:, :-size] + s[:-size, :-size]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over 8x8 uniform sliding windows.

    Variances and covariance are population-normalized (divide by 64).
    """
    a, b = _check_image(a, "a"), _check_image(b, "b")
    _check_same_shape(a, b)
    if min(a.shape) < _SSIM_WINDOW:
        raise ValueError(f"images must be at least {_SSIM_WINDOW}x{_SSIM_WINDOW}, got {a.shape}")
    af = a.astype(np.float64)
    bf = b.astype(np.float64)
    n = float(_SSIM_WINDOW * _SSIM_WINDOW)
    mu_a = _box_sums(af, _SSIM_WINDOW) / n
    mu_b = _box_sums(bf, _SSIM_WINDOW) / n
    var_a = _box_sums(af * af, _SSIM_WINDOW) / n - mu_a * mu_a
    var_b = _box_sums(bf * bf, _SSIM_WINDOW) / n - mu_b * mu_b
    cov = _box_sums(af * bf, _SSIM_WINDOW) / n - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean(num / den))
