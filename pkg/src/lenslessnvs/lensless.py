"""Lensless forward model and Wiener recovery.

A capture is the scene convolved with the camera's point spread function plus
read noise; recovery divides that out in frequency space with a scalar
noise-to-signal regularizer. PSF geometry helpers (grayscale, binarize, crop,
normalize) live here too.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .imgcore import (
    NO_NOISE,
    Image,
    ImageError,
    add_gaussian_noise,
    convolve_fft,
    to_grayscale,
)

DEFAULT_NSR = 0.00045       # scalar K of the Wiener filter
DEFAULT_SNR_DB = 40.0       # read-noise level applied to simulated captures
DEFAULT_BINARIZE_THRESHOLD = 0.1


class PsfError(ValueError):
    pass


@dataclass(frozen=True)
class Psf:
    """Point-spread-function kernel. Values are nonnegative; a normalized PSF
    sums to 1 per channel so convolution conserves mean brightness."""

    kernel: Image
    normalized: bool = False
    provenance: str = "synthetic"

    def __post_init__(self):
        if np.any(self.kernel.data < 0):
            raise PsfError("PSF values must be nonnegative")
        if self.normalized:
            sums = self.kernel.data.sum(axis=(0, 1))
            if np.any(np.abs(sums - 1.0) > 1e-6):
                raise PsfError(f"PSF marked normalized but channel sums are {sums}")

    @property
    def channels(self) -> int:
        return self.kernel.channels

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.kernel.data).tobytes())
        h.update(str(self.kernel.shape).encode())
        return h.hexdigest()[:16]


def psf_normalize(psf: Psf) -> Psf:
    sums = psf.kernel.data.sum(axis=(0, 1))
    if np.any(sums <= 0):
        raise PsfError("cannot normalize a PSF with a zero-sum channel")
    return Psf(Image(psf.kernel.data / sums), normalized=True, provenance=psf.provenance)


def psf_to_grayscale(psf: Psf) -> Psf:
    if psf.channels == 1:
        return psf
    gray = to_grayscale(psf.kernel)
    return psf_normalize(Psf(gray, provenance=psf.provenance))


def psf_binarize(psf: Psf, threshold: float = DEFAULT_BINARIZE_THRESHOLD) -> Psf:
    """Threshold at a fraction of the per-channel max to {0, 1}, renormalize."""
    if not 0.0 < threshold < 1.0:
        raise PsfError("binarize threshold must be in (0, 1)")
    data = psf.kernel.data
    peak = data.max(axis=(0, 1))
    binary = (data >= threshold * peak).astype(np.float64)
    if np.any(binary.sum(axis=(0, 1)) == 0):
        raise PsfError("binarization produced an all-zero channel")
    return psf_normalize(Psf(Image(binary), provenance="derived(binarize)"))


def psf_crop(psf: Psf, new_h: int, new_w: int) -> Psf:
    """Center crop, then renormalize."""
    h, w = psf.kernel.height, psf.kernel.width
    if new_h > h or new_w > w:
        raise PsfError(f"crop {new_h}x{new_w} exceeds kernel {h}x{w}")
    if new_h < 3 or new_w < 3:
        raise PsfError("crop must be at least 3x3")
    r0 = (h - new_h) // 2
    c0 = (w - new_w) // 2
    cropped = psf.kernel.data[r0:r0 + new_h, c0:c0 + new_w]
    return psf_normalize(Psf(Image(cropped.copy()), provenance="derived(crop)"))


def make_caustic_psf(size: int, seed: int, spikes: int = 60) -> Psf:
    """Seeded sparse-caustic test PSF: random bright spots on a faint DC floor.

    The floor (1e-3 of peak mass, uniform) guarantees full spectral support so
    the kernel is Wiener-invertible at small K.
    """
    rng = np.random.default_rng(seed)
    k = np.zeros((size, size))
    ys = rng.integers(0, size, spikes)
    xs = rng.integers(0, size, spikes)
    amps = rng.uniform(0.2, 1.0, spikes)
    np.add.at(k, (ys, xs), amps)
    # small blur spreads the spikes into blobs
    yy, xx = np.mgrid[-2:3, -2:3]
    g = np.exp(-(yy ** 2 + xx ** 2) / 2.0)
    blurred = convolve_fft(Image(k), Image(g / g.sum()), mode="circular").plane()
    blurred = np.clip(blurred, 0.0, None)
    blurred += 1e-3 * blurred.max()
    return psf_normalize(Psf(Image(blurred), provenance="synthetic"))


@dataclass(frozen=True)
class LenslessCapture:
    raster: Image
    snr_db: float
    psf_id: str
    mode: str = "linear"


_psf_registry: dict[str, Psf] = {}


def register_psf(psf: Psf) -> str:
    key = psf.content_hash()
    _psf_registry[key] = psf
    return key


def lookup_psf(psf_id: str) -> Psf:
    if psf_id not in _psf_registry:
        raise PsfError(f"unknown PSF id {psf_id}")
    return _psf_registry[psf_id]


def simulate_capture(gt: Image, psf: Psf, snr_db: float = DEFAULT_SNR_DB,
                     seed: int = 0, mode: str = "linear") -> LenslessCapture:
    """Forward model: capture = (gt convolved with PSF) + Gaussian read noise.

    A grayscale PSF applies the same kernel to every channel; an RGB PSF
    (ablation path) convolves each channel with its own plane.
    """
    if not psf.normalized:
        raise PsfError("simulate_capture requires a normalized PSF")
    if psf.channels == 1:
        blurred = convolve_fft(gt, psf.kernel, mode=mode)
    else:
        if gt.channels != psf.channels:
            raise ImageError("RGB PSF requires an RGB image")
        planes = [
            convolve_fft(Image(gt.data[:, :, c]), Image(psf.kernel.data[:, :, c]),
                         mode=mode).plane()
            for c in range(psf.channels)
        ]
        blurred = Image(np.stack(planes, axis=-1))
    noisy = add_gaussian_noise(blurred, snr_db, seed)
    return LenslessCapture(noisy, snr_db, register_psf(psf), mode)


def wiener_filter_norm(psf: Psf, shape: tuple[int, int], k: float) -> float:
    """Frobenius norm of the Wiener frequency response H*/(|H|^2+K); strictly
    decreasing in K. Diagnostic used by property tests and `psf --inspect`."""
    hf = np.fft.fft2(psf.kernel.plane(), s=shape)
    w = np.conj(hf) / (np.abs(hf) ** 2 + k)
    return float(np.sqrt(np.sum(np.abs(w) ** 2)))


def wiener_deconvolve(capture: LenslessCapture, psf: Psf, k: float = DEFAULT_NSR) -> Image:
    """Regularized inverse filter: Ihat(w) = H*(w) G(w) / (|H(w)|^2 + K).

    Evaluated on the same padded domain the forward model used (linear mode
    pads to H+kh-1 x W+kw-1; circular works on the raw H x W grid), then
    cropped back. Output is finite but intentionally not clamped to [0, 1].
    """
    if psf.channels != 1:
        raise PsfError("wiener_deconvolve expects a single-channel PSF")
    if k < 0:
        raise PsfError("noise-to-signal ratio k must be >= 0")
    g = capture.raster
    h, w = g.height, g.width
    kh, kw = psf.kernel.height, psf.kernel.width
    kern = psf.kernel.plane()

    if capture.mode == "linear":
        # Forward cropped the full convolution at (kh//2, kw//2); re-embed the
        # capture at that offset so the recovered image lands at the origin.
        ph, pw = h + kh - 1, w + kw - 1
        hf = np.fft.fft2(kern, s=(ph, pw))
        r0, c0 = kh // 2, kw // 2
    elif capture.mode == "circular":
        ph, pw = h, w
        kpad = np.zeros((h, w))
        kpad[:kh, :kw] = kern
        kpad = np.roll(kpad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
        hf = np.fft.fft2(kpad)
        r0 = c0 = 0
    else:
        raise PsfError(f"unknown capture mode {capture.mode!r}")

    mag2 = np.abs(hf) ** 2
    if k == 0.0 and mag2.min() < 1e-12:
        raise PsfError("k = 0 with a PSF that has spectral zeros")
    filt = np.conj(hf) / (mag2 + k)

    out = np.empty_like(g.data)
    for c in range(g.channels):
        gpad = np.zeros((ph, pw))
        gpad[r0:r0 + h, c0:c0 + w] = g.data[:, :, c]
        est = np.real(np.fft.ifft2(np.fft.fft2(gpad) * filt))
        out[:, :, c] = est[:h, :w]
    if not np.all(np.isfinite(out)):
        raise PsfError("Wiener output is non-finite; increase k")
    return Image(out)
