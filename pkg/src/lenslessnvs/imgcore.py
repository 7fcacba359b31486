"""Image containers, 2-D convolution (FFT and direct), noise injection, and
quality metrics.

Images are (H, W, C) float64 arrays in linear light, nominal range [0, 1].
Values may leave that range mid-pipeline; clamping happens only at display
encode time (save_png). All convolution here is true convolution (kernel
flipped), not correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Sentinel for "no noise" in SNR-driven noise injection.
NO_NOISE = math.inf

# PSNR reported for bit-identical pairs instead of +inf.
PSNR_CAP_DB = 100.0


class ImageError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    """An (H, W, C) float64 raster in linear light, C in {1, 3}."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ImageError(f"expected (H, W, 1|3) array, got shape {np.shape(self.data)}")
        if not np.all(np.isfinite(arr)):
            raise ImageError("image contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def plane(self, c: int = 0) -> np.ndarray:
        return self.data[:, :, c]


def _check_kernel(kernel: Image):
    if kernel.channels != 1:
        raise ImageError("convolution kernel must be single-channel")
    # Image.__post_init__ already rejects non-finite values.


def _crop_center(full: np.ndarray, h: int, w: int, kh: int, kw: int) -> np.ndarray:
    """Crop the (h, w) window of a full (h+kh-1, w+kw-1) linear convolution so
    that a centered delta kernel acts as the identity."""
    r0, c0 = kh // 2, kw // 2
    return full[r0:r0 + h, c0:c0 + w]


def convolve_fft(image: Image, kernel: Image, mode: str = "linear") -> Image:
    """Per-channel 2-D convolution of image with a single-channel kernel.

    mode "linear": zero-padded linear convolution computed via FFT on the
    (H+kh-1, W+kw-1) domain, cropped back to the central H x W window.
    mode "circular": periodic wrap-around convolution on the H x W domain
    (kernel must fit inside the image); exactly invertible in frequency space.
    """
    _check_kernel(kernel)
    h, w = image.height, image.width
    kh, kw = kernel.height, kernel.width
    k = kernel.plane()

    if mode == "linear":
        ph, pw = h + kh - 1, w + kw - 1
        kf = np.fft.rfft2(k, s=(ph, pw))
        out = np.empty_like(image.data)
        for c in range(image.channels):
            full = np.fft.irfft2(np.fft.rfft2(image.data[:, :, c], s=(ph, pw)) * kf,
                                 s=(ph, pw))
            out[:, :, c] = _crop_center(full, h, w, kh, kw)
    elif mode == "circular":
        if kh > h or kw > w:
            raise ImageError("circular mode requires kernel no larger than the image")
        kpad = np.zeros((h, w))
        kpad[:kh, :kw] = k
        # shift the kernel center to the origin so a delta kernel is identity
        kpad = np.roll(kpad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
        kf = np.fft.rfft2(kpad)
        out = np.empty_like(image.data)
        for c in range(image.channels):
            out[:, :, c] = np.fft.irfft2(np.fft.rfft2(image.data[:, :, c]) * kf, s=(h, w))
    else:
        raise ImageError(f"unknown convolution mode {mode!r}")
    return Image(out)


def convolve_direct(image: Image, kernel: Image) -> Image:
    """Textbook spatial-domain convolution, zero-padded linear boundary
    semantics identical to convolve_fft(mode="linear"). Oracle use; O(HWkhkw)."""
    _check_kernel(kernel)
    h, w = image.height, image.width
    kh, kw = kernel.height, kernel.width
    k = kernel.plane()
    out = np.empty_like(image.data)
    for c in range(image.channels):
        full = np.zeros((h + kh - 1, w + kw - 1))
        plane = image.data[:, :, c]
        for a in range(kh):
            for b in range(kw):
                full[a:a + h, b:b + w] += k[a, b] * plane
        out[:, :, c] = _crop_center(full, h, w, kh, kw)
    return Image(out)


# ITU-R BT.601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114])


def to_grayscale(image: Image) -> Image:
    if image.channels != 3:
        raise ImageError("to_grayscale expects a 3-channel image")
    return Image(image.data @ _LUMA)


def add_gaussian_noise(image: Image, snr_db: float, seed: int) -> Image:
    """Add white Gaussian noise with sigma chosen so that
    10*log10(mean(I^2)/sigma^2) equals snr_db. NO_NOISE returns the input."""
    if snr_db == NO_NOISE:
        return image
    if not np.isfinite(snr_db):
        raise ImageError("snr_db must be finite (or the NO_NOISE sentinel)")
    power = float(np.mean(image.data ** 2))
    if power == 0.0:
        raise ImageError("cannot calibrate noise against an all-zero image")
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(seed)
    return Image(image.data + rng.normal(0.0, sigma, size=image.shape))


def mse(a: Image, b: Image) -> float:
    if a.shape != b.shape:
        raise ImageError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a.data - b.data) ** 2))


def psnr(a: Image, b: Image) -> float:
    """PSNR in dB against peak 1.0, capped at PSNR_CAP_DB for identical pairs."""
    m = mse(a, b)
    if m == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / m))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filt_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable valid-mode filtering, rows then columns
    win = g.size
    v = np.lib.stride_tricks.sliding_window_view(x, win, axis=1) @ g
    v = np.moveaxis(np.lib.stride_tricks.sliding_window_view(v, win, axis=0), -1, 0)
    return np.tensordot(g, v, axes=(0, 0))


def ssim(a: Image, b: Image) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), C1=(0.01)^2,
    C2=(0.03)^2, peak 1.0, averaged over channels. Valid-window statistics,
    population (not sample) variances."""
    if a.shape != b.shape:
        raise ImageError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.height < 11 or a.width < 11:
        raise ImageError("ssim needs images at least 11x11")
    g = _gaussian_window()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for c in range(a.channels):
        x, y = a.data[:, :, c], b.data[:, :, c]
        mu_x = _filt_valid(x, g)
        mu_y = _filt_valid(y, g)
        var_x = _filt_valid(x * x, g) - mu_x ** 2
        var_y = _filt_valid(y * y, g) - mu_y ** 2
        cov = _filt_valid(x * y, g) - mu_x * mu_y
        s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
        vals.append(np.mean(s))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# File I/O: PNG (sRGB-coded integers) and PFM (raw little-endian floats)
# ---------------------------------------------------------------------------

def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.clip(c, 0, None) ** (1 / 2.4) - 0.055)


def load_png(path) -> Image:
    """Load an 8- or 16-bit PNG and decode sRGB to linear light."""
    import cv2

    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageError(f"cannot read PNG {path}")
    if raw.ndim == 2:
        raw = raw[:, :, None]
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    if raw.shape[2] == 3:
        raw = raw[:, :, ::-1]  # BGR -> RGB
    peak = 65535.0 if raw.dtype == np.uint16 else 255.0
    return Image(srgb_to_linear(raw.astype(np.float64) / peak))


def save_png(image: Image, path, bit_depth: int = 8):
    """Encode linear light to sRGB, clamp to [0, 1], write 8- or 16-bit PNG."""
    import cv2

    if bit_depth not in (8, 16):
        raise ImageError("PNG bit depth must be 8 or 16")
    coded = np.clip(linear_to_srgb(np.clip(image.data, 0.0, 1.0)), 0.0, 1.0)
    if bit_depth == 8:
        arr = np.round(coded * 255.0).astype(np.uint8)
    else:
        arr = np.round(coded * 65535.0).astype(np.uint16)
    if arr.shape[2] == 3:
        arr = arr[:, :, ::-1]
    else:
        arr = arr[:, :, 0]
    if not cv2.imwrite(str(path), arr):
        raise ImageError(f"cannot write PNG {path}")


def save_pfm(image: Image, path):
    """Write a little-endian PFM (scale -1.0); lossless float32 round-trip."""
    data = image.data.astype(np.float32)
    header = b"PF\n" if image.channels == 3 else b"Pf\n"
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{image.width} {image.height}\n".encode())
        f.write(b"-1.0\n")
        # PFM stores rows bottom-to-top
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def load_pfm(path) -> Image:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise ImageError(f"not a PFM file: {path}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = h * w * channels
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(count * 4), dtype=dtype, count=count)
    data = data.reshape(h, w, channels)[::-1].astype(np.float64)
    return Image(data)
