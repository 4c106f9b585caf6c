"""Fourier-optics forward model: coefficients -> wavefront -> pupil -> PSF -> blur.

Wavefronts are in waves; the pupil phase is ``2*pi*W``.  PSFs are incoherent,
unit-sum, and centred so that the diffraction-limited peak sits at index
``(M//2, M//2)``.  The same centering is used when a PSF is turned into a
transfer function, so blurring and Wiener filtering register exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .zernike import N_COEFFS, PupilGrid, check_coeffs


class DegenerateApertureError(ValueError):
    """The pupil carries no energy, so no PSF can be normalized."""


@dataclass(frozen=True)
class Wavefront:
    """Optical path deviation in waves on a pupil grid, zero outside the disk."""

    values: np.ndarray
    grid: PupilGrid

    def __post_init__(self):
        n = self.grid.n_samples
        if self.values.shape[-2:] != (n, n):
            raise ValueError(f"wavefront shape {self.values.shape} does not match grid n={n}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("wavefront values must be finite")
        if np.any(self.values[..., ~self.grid.mask]):
            raise ValueError("wavefront must be zero outside the aperture")

    @property
    def mask(self) -> np.ndarray:
        return self.grid.mask

    def rms(self) -> np.ndarray:
        v = self.values[..., self.mask]
        return np.sqrt(np.mean(v**2, axis=-1))


def wavefront_from_coeffs(coeffs, grid: PupilGrid) -> Wavefront:
    """Sum of Noll modes j = 2..37 weighted by ``coeffs`` (waves).

    ``coeffs`` may carry leading batch dimensions.
    """
    a = check_coeffs(coeffs)
    w = np.tensordot(a, grid.basis(), axes=([-1], [0]))
    return Wavefront(w, grid)


def pupil_from_wavefront(w: Wavefront) -> np.ndarray:
    """Complex pupil ``mask * exp(i 2 pi W)``."""
    return np.where(w.mask, np.exp(2j * np.pi * w.values), 0.0)


@dataclass(frozen=True)
class PsfGeometry:
    """Sampling of the focal plane: zero-padding factor and crop size."""

    grid: PupilGrid
    pad_factor: int = 2
    crop: int | None = None

    def __post_init__(self):
        if int(self.pad_factor) < 1:
            raise ValueError(f"pad_factor must be >= 1, got {self.pad_factor}")
        if self.crop is not None and not 1 <= self.crop <= self.field_size:
            raise ValueError(f"crop must be in 1..{self.field_size}, got {self.crop}")

    @property
    def field_size(self) -> int:
        return int(self.pad_factor) * self.grid.n_samples

    @property
    def size(self) -> int:
        return self.field_size if self.crop is None else int(self.crop)

    @property
    def crop_slice(self) -> slice:
        return crop_slice(self.field_size, self.size)


def crop_slice(field_size: int, size: int) -> slice:
    start = field_size // 2 - size // 2
    return slice(start, start + size)


def pupil_field(pupil: np.ndarray, field_size: int) -> np.ndarray:
    """Zero-embed a pupil (top-left corner) in a ``field_size`` square field."""
    n = pupil.shape[-1]
    field = np.zeros(pupil.shape[:-2] + (field_size, field_size), dtype=np.complex128)
    field[..., :n, :n] = pupil
    return field


def focal_field(pupil: np.ndarray, pad_factor: int, crop: int | None = None) -> np.ndarray:
    """Centred, cropped complex amplitude in the focal plane (unnormalized DFT)."""
    k = int(pad_factor) * pupil.shape[-1]
    e = np.fft.fft2(pupil_field(pupil, k))
    e = np.fft.fftshift(e, axes=(-2, -1))
    s = crop_slice(k, k if crop is None else crop)
    return e[..., s, s]


def psf_from_pupil(pupil: np.ndarray, pad_factor: int = 2, crop: int | None = None) -> np.ndarray:
    """Unit-sum intensity PSF of a complex pupil.

    The pupil is zero-padded to ``pad_factor`` times its size, transformed,
    centred, squared and cropped to ``crop`` pixels (default: no crop).

    Raises
    ------
    DegenerateApertureError
        If the cropped intensity has zero total energy.
    """
    if int(pad_factor) < 1:
        raise ValueError(f"pad_factor must be >= 1, got {pad_factor}")
    e = focal_field(pupil, pad_factor, crop)
    intensity = e.real**2 + e.imag**2
    total = intensity.sum(axis=(-2, -1), keepdims=True)
    if np.any(total <= 0.0):
        raise DegenerateApertureError("pupil has zero transmitted energy")
    return intensity / total


def psf_from_coeffs(coeffs, geom: PsfGeometry) -> np.ndarray:
    w = wavefront_from_coeffs(coeffs, geom.grid)
    return psf_from_pupil(pupil_from_wavefront(w), geom.pad_factor, geom.crop)


def diffraction_limited_psf(geom: PsfGeometry) -> np.ndarray:
    return psf_from_coeffs(np.zeros(N_COEFFS), geom)


def psf_centroid(psf: np.ndarray) -> tuple[float, float]:
    """Intensity centroid ``(x, y)`` in pixels relative to the centre index."""
    m = psf.shape[-1]
    idx = np.arange(m) - m // 2
    total = psf.sum()
    return float((psf.sum(axis=0) * idx).sum() / total), float((psf.sum(axis=1) * idx).sum() / total)


def strehl_ratio(psf: np.ndarray, geom: PsfGeometry) -> float:
    return float(psf.max() / diffraction_limited_psf(geom).max())


def psf_transfer_function(psf: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Transfer function of a centred PSF on an image of ``shape``.

    The PSF centre pixel ``(M//2, M//2)`` is rolled to the origin so the
    convolution introduces no shift.
    """
    h, w = shape
    mh, mw = psf.shape
    if mh > h or mw > w:
        raise ValueError(f"PSF {psf.shape} larger than image {shape}")
    kernel = np.zeros((h, w))
    kernel[:mh, :mw] = psf
    kernel = np.roll(kernel, (-(mh // 2), -(mw // 2)), axis=(0, 1))
    return np.fft.fft2(kernel)


BOUNDARY_MODES = ("circular", "edge")


def _check_boundary(mode: str) -> None:
    if mode not in BOUNDARY_MODES:
        raise ValueError(f"boundary mode must be one of {BOUNDARY_MODES}, got {mode!r}")


def boundary_pad(image: np.ndarray, psf_shape: tuple[int, int], mode: str) -> tuple[np.ndarray, tuple[slice, slice]]:
    """Pad for non-circular filtering; returns the padded image and crop window."""
    _check_boundary(mode)
    if mode == "circular":
        return image, (slice(None), slice(None))
    ph, pw = psf_shape[0] // 2 + 1, psf_shape[1] // 2 + 1
    padded = np.pad(image, ((ph, ph), (pw, pw)), mode="edge")
    return padded, (slice(ph, ph + image.shape[0]), slice(pw, pw + image.shape[1]))


def blur_image(clean: np.ndarray, psf: np.ndarray, mode: str = "circular") -> np.ndarray:
    """Convolve a single-channel image with a centred PSF.

    ``mode="circular"`` wraps around; ``mode="edge"`` replicates border pixels
    before a circular convolution and crops back to the input size.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {clean.shape}")
    if psf.shape[0] > clean.shape[0] or psf.shape[1] > clean.shape[1]:
        raise ValueError(f"PSF {psf.shape} larger than image {clean.shape}")
    padded, window = boundary_pad(clean, psf.shape, mode)
    otf = psf_transfer_function(psf, padded.shape)
    out = np.fft.ifft2(np.fft.fft2(padded) * otf).real
    return out[window]
