"""Deterministic image kernels: the preprocessing pipeline and augmentation.

Images are float arrays in [0, 1]: grayscale (H, W) or color (H, W, 3).
Every stage preserves that range. Border handling is clamp-to-edge
throughout so no stage invents dark frame edges.

Canny conventions (pinned so independent reimplementations can match
bit-for-bit):

- Sobel 3x3 by correlation, x right / y down:
  Kx = [[-1,0,1],[-2,0,2],[-1,0,1]], Ky = Kx transposed.
- gradient magnitude = hypot(gx, gy), divided by its max (all-zero
  magnitude short-circuits to an empty edge map); thresholds apply to this
  normalized magnitude.
- direction = arctan2(gy, gx) in degrees mod 180, quantized to 4 bins:
  [0,22.5) u [157.5,180) -> 0 (compare left/right), [22.5,67.5) -> 45
  (compare (-1,-1)/(+1,+1)), [67.5,112.5) -> 90 (compare up/down),
  [112.5,157.5) -> 135 (compare (-1,+1)/(+1,-1)).
- non-maximum suppression keeps a pixel iff it is >= the scan-earlier
  neighbor and strictly > the scan-later neighbor (so a symmetric two-pixel
  tie keeps only its bottom/right member and step edges stay one pixel
  wide); out-of-bounds neighbors count as 0.
- strong: magnitude >= high; weak: low <= magnitude < high; hysteresis
  keeps weak pixels 8-connected to a strong pixel.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from awdvision.errors import ConfigError

BT601_WEIGHTS = (0.299, 0.587, 0.114)

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


@dataclass(frozen=True)
class PipelineConfig:
    """Preprocessing and augmentation knobs.

    ``target_size`` is (height, width). ``channels`` controls how the final
    single-channel edge map enters the network: 3 replicates it, 1 keeps it
    for a single-channel stem. ``enabled=False`` bypasses the edge pipeline
    and emits the resized image unchanged.
    """

    target_size: tuple = (224, 224)
    blur_kernel: int = 5
    blur_sigma: float = 1.0
    unsharp_amount: float = 1.0
    canny_low: float = 0.2
    canny_high: float = 0.6
    rotation_range_deg: float = 15.0
    brightness_range: tuple = (0.8, 1.2)
    enabled: bool = True
    channels: int = 3

    def __post_init__(self):
        h, w = self.target_size
        if h < 1 or w < 1:
            raise ConfigError(f"target_size must be positive, got {self.target_size}")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError(f"blur_kernel must be odd, got {self.blur_kernel}")
        if self.blur_sigma <= 0:
            raise ConfigError(f"blur_sigma must be positive, got {self.blur_sigma}")
        if self.unsharp_amount < 0:
            raise ConfigError(f"unsharp_amount must be >= 0, got {self.unsharp_amount}")
        if not (0.0 <= self.canny_low < self.canny_high <= 1.0):
            raise ConfigError(
                f"need 0 <= canny_low < canny_high <= 1, got "
                f"{self.canny_low}, {self.canny_high}")
        lo, hi = self.brightness_range
        if not (0 < lo <= hi):
            raise ConfigError(f"bad brightness_range {self.brightness_range}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")


def _bilinear_sample(img, sy, sx):
    """Sample img at fractional (sy, sx) grids, clamping to the border."""
    h, w = img.shape[:2]
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = sy - y0
    fx = sx - x0
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def resize(img, width, height):
    """Bilinear resize with half-pixel-centered sampling."""
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ValueError(f"cannot resize empty image of shape {img.shape}")
    if width < 1 or height < 1:
        raise ValueError(f"target dims must be >= 1, got {width}x{height}")
    sy = (np.arange(height) + 0.5) * (h / height) - 0.5
    sx = (np.arange(width) + 0.5) * (w / width) - 0.5
    out = _bilinear_sample(img, sy[:, None], sx[None, :])
    return np.clip(out, 0.0, 1.0)


def gaussian_kernel1d(k, sigma):
    """Normalized 1-D Gaussian weights exp(-i^2 / (2 sigma^2)), i in [-k//2, k//2]."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    offsets = np.arange(k, dtype=np.float64) - k // 2
    weights = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    return weights / weights.sum()


def _correlate1d_edge(img, weights, axis):
    pad = len(weights) // 2
    pads = [(0, 0)] * img.ndim
    pads[axis] = (pad, pad)
    padded = np.pad(img, pads, mode="edge")
    win = sliding_window_view(padded, len(weights), axis=axis)
    return np.tensordot(win, weights, axes=([-1], [0]))


def gaussian_blur(img, k, sigma):
    """Separable Gaussian smoothing with clamp-to-edge borders."""
    weights = gaussian_kernel1d(k, sigma)
    out = _correlate1d_edge(img, weights, axis=0)
    out = _correlate1d_edge(out, weights, axis=1)
    return np.clip(out, 0.0, 1.0)


def unsharp_mask(img, amount, k, sigma):
    """Sharpen: img + amount * (img - blur(img)), clamped back to [0, 1]."""
    blurred = gaussian_blur(img, k, sigma)
    return np.clip(img + amount * (img - blurred), 0.0, 1.0)


def to_grayscale(img):
    """BT.601 luma; grayscale input passes through unchanged."""
    if img.ndim == 2:
        return img
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")
    r, g, b = BT601_WEIGHTS
    return img[:, :, 0] * r + img[:, :, 1] * g + img[:, :, 2] * b


def sobel_gradients(img):
    """3x3 Sobel correlation with clamp-to-edge borders; returns (gx, gy)."""
    padded = np.pad(img, 1, mode="edge")
    win = sliding_window_view(padded, (3, 3), axis=(0, 1))
    gx = np.tensordot(win, _SOBEL_X, axes=([2, 3], [0, 1]))
    gy = np.tensordot(win, _SOBEL_Y, axes=([2, 3], [0, 1]))
    return gx, gy


def _dilate8(mask):
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    out[1:, 1:] |= mask[:-1, :-1]
    out[1:, :-1] |= mask[:-1, 1:]
    out[:-1, 1:] |= mask[1:, :-1]
    out[:-1, :-1] |= mask[1:, 1:]
    return out


def canny(img, low, high):
    """Binary edge map via Sobel, NMS, double threshold and hysteresis.

    Thresholds are on gradient magnitude normalized by its max; see the
    module docstring for the pinned conventions. Output values are exactly
    0.0 or 1.0.
    """
    if img.ndim != 2:
        raise ValueError(f"canny expects a grayscale image, got shape {img.shape}")
    if not (0.0 <= low < high <= 1.0):
        raise ValueError(f"need 0 <= low < high <= 1, got {low}, {high}")

    gx, gy = sobel_gradients(img)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak == 0.0:
        return np.zeros_like(img)
    mag = mag / peak

    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    bins = np.zeros(ang.shape, dtype=np.uint8)
    bins[(ang >= 22.5) & (ang < 67.5)] = 1
    bins[(ang >= 67.5) & (ang < 112.5)] = 2
    bins[(ang >= 112.5) & (ang < 157.5)] = 3

    padded = np.pad(mag, 1)  # out-of-bounds neighbors compare as 0
    shifted = {
        (dy, dx): padded[1 + dy:1 + dy + mag.shape[0], 1 + dx:1 + dx + mag.shape[1]]
        for dy in (-1, 0, 1) for dx in (-1, 0, 1)
    }
    # (scan-earlier neighbor, scan-later neighbor) per direction bin
    neighbor_pairs = {0: ((0, -1), (0, 1)), 1: ((-1, -1), (1, 1)),
                      2: ((-1, 0), (1, 0)), 3: ((-1, 1), (1, -1))}
    keep = np.zeros(mag.shape, dtype=bool)
    for b, (earlier, later) in neighbor_pairs.items():
        sel = bins == b
        keep |= sel & (mag >= shifted[earlier]) & (mag > shifted[later])
    nms = np.where(keep, mag, 0.0)

    strong = nms >= high
    weak = (nms >= low) & ~strong
    edges = strong.copy()
    frontier = strong
    while frontier.any():
        grown = _dilate8(frontier) & weak & ~edges
        edges |= grown
        frontier = grown
    return edges.astype(img.dtype)


def invert(img):
    """Flip intensities: 1 - img."""
    return 1.0 - img


def normalize(img):
    """Min-max rescale to [0, 1]; a constant image maps to all zeros."""
    lo = img.min()
    hi = img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def preprocess(img, cfg):
    """Full pipeline: resize, blur, unsharp, grayscale, Canny, invert, rescale.

    Returns a (1, C, H, W) float32 tensor. With ``cfg.enabled`` the result
    is the inverted edge map replicated to ``cfg.channels``; otherwise it is
    the resized image itself (already in [0, 1]).
    """
    th, tw = cfg.target_size
    resized = resize(img, tw, th)
    if cfg.enabled:
        smoothed = gaussian_blur(resized, cfg.blur_kernel, cfg.blur_sigma)
        sharp = unsharp_mask(smoothed, cfg.unsharp_amount, cfg.blur_kernel,
                             cfg.blur_sigma)
        gray = to_grayscale(sharp)
        edges = canny(gray, cfg.canny_low, cfg.canny_high)
        out = invert(edges)
        # final rescale; an edge-free map stays all ones (min-max would
        # collapse the constant map to zeros and erase the "no edges" signal)
        if out.max() > out.min():
            out = normalize(out)
        plane = out
    else:
        plane = resized
    if plane.ndim == 2 and cfg.channels == 3:
        chw = np.repeat(plane[None, :, :], 3, axis=0)
    elif plane.ndim == 2:
        chw = plane[None, :, :]
    elif cfg.channels == 1:
        chw = to_grayscale(plane)[None, :, :]
    else:
        chw = plane.transpose(2, 0, 1)
    return chw[None].astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip(img):
    """Mirror the image horizontally."""
    return img[:, ::-1].copy()


def rotate(img, degrees):
    """Rotate about the image center, bilinear resampling, edge-replicated fill."""
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.radians(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    sx = cos_t * xx + sin_t * yy + cx
    sy = -sin_t * xx + cos_t * yy + cy
    out = _bilinear_sample(img, sy, sx)
    return np.clip(out, 0.0, 1.0)


def adjust_brightness(img, factor):
    """Scale intensities by factor, clamping to [0, 1]."""
    return np.clip(img * factor, 0.0, 1.0)


def augment(img, seed, cfg):
    """Apply exactly one of rotate / horizontal flip / brightness scale.

    The branch and its parameter come from a generator seeded with ``seed``,
    so the same seed always reproduces the same output. Labels are untouched
    by construction: none of the transforms knows about them.
    """
    rng = np.random.default_rng(seed)
    choice = int(rng.integers(3))
    if choice == 0:
        angle = rng.uniform(-cfg.rotation_range_deg, cfg.rotation_range_deg)
        return rotate(img, angle)
    if choice == 1:
        return hflip(img)
    factor = rng.uniform(*cfg.brightness_range)
    return adjust_brightness(img, factor)
