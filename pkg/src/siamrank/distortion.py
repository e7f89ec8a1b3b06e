"""Graded synthetic distortions and ranked image groups.

Images are 2-D float arrays of luminance in [0, 1]. Each distortion kind
takes a severity parameter; a :class:`DistortionSpec` lists those
parameters from mildest to harshest, and :func:`synthesize_ranked_group`
applies them to one reference to get a group whose within-group quality
order is known by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft
from scipy.ndimage import correlate1d

KINDS = ("gaussian_blur", "gaussian_noise", "jpeg_proxy")

DEFAULT_LEVELS = {
    "gaussian_blur": (1.0, 2.0, 3.0, 4.0, 5.0),
    "gaussian_noise": (0.02, 0.05, 0.1, 0.2, 0.4),
    "jpeg_proxy": (80, 60, 40, 20, 10),
}

# IJG luminance quantization table (quality 50)
JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def _as_image(image) -> np.ndarray:
    im = np.asarray(image, dtype=np.float64)
    if im.ndim != 2:
        raise ValueError(f"expected a 2-D luminance image, got shape {im.shape}")
    return im


def to_luminance(image) -> np.ndarray:
    """Convert an (H, W, 3) RGB image to luminance using BT.601 weights.

    2-D input is returned unchanged (as float64).
    """
    im = np.asarray(image, dtype=np.float64)
    if im.ndim == 2:
        return im
    if im.ndim == 3 and im.shape[2] in (3, 4):
        return im[..., :3] @ np.array([0.299, 0.587, 0.114])
    raise ValueError(f"cannot convert image of shape {im.shape} to luminance")


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflected borders (kernel radius ceil(3 sigma))."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    im = _as_image(image)
    if sigma == 0:
        return im.copy()
    k = gaussian_kernel(sigma)
    out = correlate1d(im, k, axis=0, mode="reflect")
    return correlate1d(out, k, axis=1, mode="reflect")


def gaussian_noise(image, sigma: float, seed: int = 0, clip: bool = True) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise; clamp to [0, 1] unless ``clip`` is False."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    im = _as_image(image)
    if sigma == 0:
        return im.copy()
    rng = np.random.default_rng(seed)
    out = im + rng.normal(0.0, sigma, size=im.shape)
    return np.clip(out, 0.0, 1.0) if clip else out


def jpeg_quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled with the IJG quality formula.

    The DC step is capped at its quality-50 value (16) so that a flat block
    keeps its mean brightness at every quality.
    """
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.clip(np.floor((JPEG_LUMA_TABLE * scale + 50.0) / 100.0), 1, 255)
    table[0, 0] = min(table[0, 0], JPEG_LUMA_TABLE[0, 0])
    return table


def jpeg_proxy(image, quality: int) -> np.ndarray:
    """Blockwise 8x8 DCT quantization approximating baseline JPEG luminance coding.

    Image borders are edge-padded to a multiple of 8 and cropped back.
    """
    table = jpeg_quant_table(quality)
    im = _as_image(image)
    h, w = im.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(im * 255.0 - 128.0, ((0, ph), (0, pw)), mode="edge")
    hb, wb = x.shape[0] // 8, x.shape[1] // 8
    blocks = x.reshape(hb, 8, wb, 8).transpose(0, 2, 1, 3)
    coef = fft.dctn(blocks, axes=(2, 3), norm="ortho")
    coef = np.round(coef / table) * table
    rec = fft.idctn(coef, axes=(2, 3), norm="ortho")
    rec = rec.transpose(0, 2, 1, 3).reshape(hb * 8, wb * 8)[:h, :w]
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0)


def psnr(reference, distorted, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    ref = np.asarray(reference, dtype=np.float64)
    dis = np.asarray(distorted, dtype=np.float64)
    mse = np.mean((ref - dis) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


@dataclass
class DistortionSpec:
    """One distortion kind and its severity grid, mildest first.

    For ``jpeg_proxy`` the levels are quality factors, so they decrease.
    """

    kind: str
    levels: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}; expected one of {KINDS}")
        if not self.levels:
            self.levels = DEFAULT_LEVELS[self.kind]
        self.levels = tuple(self.levels)
        if len(self.levels) < 2:
            raise ValueError("a distortion spec needs at least 2 levels")
        steps = np.diff(np.asarray(self.levels, dtype=np.float64))
        if self.kind == "jpeg_proxy":
            steps = -steps
        if not np.all(steps > 0):
            raise ValueError(f"{self.kind} levels must be strictly increasing in severity: {self.levels}")

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def apply_distortion(image, kind: str, level, seed: int = 0) -> np.ndarray:
    if kind == "gaussian_blur":
        return gaussian_blur(image, level)
    if kind == "gaussian_noise":
        return gaussian_noise(image, level, seed)
    if kind == "jpeg_proxy":
        return jpeg_proxy(image, int(level))
    raise ValueError(f"unknown distortion kind {kind!r}")


@dataclass
class RankedGroup:
    """A reference and its distorted copies; ``distorted[k]`` is level ``k``.

    Lower level index means higher quality. No absolute quality is stored.
    """

    reference: np.ndarray
    distorted: list[np.ndarray]
    kind: str
    reference_id: str
    levels: tuple = field(default=())

    @property
    def n(self) -> int:
        return len(self.distorted)

    @property
    def shape(self) -> tuple[int, int]:
        return self.reference.shape

    def ordered_pairs(self) -> list[tuple[int, int]]:
        """(better, worse) level-index pairs."""
        return [(i, j) for i in range(self.n) for j in range(i + 1, self.n)]


def level_seed(seed: int, level_index: int) -> int:
    return int(np.random.SeedSequence([seed, level_index]).generate_state(1)[0])


def synthesize_ranked_group(reference, spec: DistortionSpec, reference_id: str = "ref") -> RankedGroup:
    ref = _as_image(reference)
    distorted = [
        apply_distortion(ref, spec.kind, level, level_seed(spec.seed, k))
        for k, level in enumerate(spec.levels)
    ]
    return RankedGroup(ref, distorted, spec.kind, reference_id, spec.levels)


# ---------------------------------------------------------------------------
# Procedural reference images
# ---------------------------------------------------------------------------


def synthetic_reference(seed: int, size: int = 96, rmin: float = 1.5, rmax: float | None = None) -> np.ndarray:
    """Dead-leaves scene: opaque discs of random gray stacked until the frame is covered.

    Radii follow a ``r**-3`` density on ``[rmin, rmax]``, which gives the
    scale-invariant edge statistics of natural photographs. Serves as a
    pristine reference when no image collection is at hand.
    """
    rng = np.random.default_rng(seed)
    rmax = rmax or size / 4
    im = np.full((size, size), np.nan)
    uncovered = size * size
    while uncovered:
        u = rng.random()
        r = 1.0 / np.sqrt((1.0 - u) / rmin**2 + u / rmax**2)
        cy, cx = rng.uniform(-r, size + r, 2)
        value = rng.uniform(0.0, 1.0)
        y0, y1 = max(int(cy - r), 0), min(int(cy + r) + 1, size)
        x0, x1 = max(int(cx - r), 0), min(int(cx + r) + 1, size)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        window = im[y0:y1, x0:x1]
        # earlier discs occlude later ones
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & np.isnan(window)
        window[mask] = value
        uncovered -= int(mask.sum())
    return im
