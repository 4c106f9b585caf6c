"""Non-blind Wiener restoration and PSNR / oracle-gap reporting."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .optics import PsfGeometry, boundary_pad, psf_from_coeffs, psf_transfer_function


@dataclass(frozen=True)
class WienerConfig:
    nsr: float = 1e-3
    boundary: str = "edge"

    def __post_init__(self):
        if not self.nsr > 0:
            raise ValueError(f"nsr must be > 0, got {self.nsr}")


def wiener_filter(otf: np.ndarray, nsr: float) -> np.ndarray:
    """Constant-NSR Wiener filter ``conj(H) / (|H|^2 + nsr)``."""
    if not nsr > 0:
        raise ValueError(f"nsr must be > 0, got {nsr}")
    return np.conj(otf) / (otf.real**2 + otf.imag**2 + nsr)


def wiener_deconvolve(blurred: np.ndarray, psf: np.ndarray, cfg: WienerConfig | None = None) -> np.ndarray:
    """Restore ``blurred`` with a known centred PSF; output clipped to [0, 1]."""
    cfg = cfg or WienerConfig()
    blurred = np.asarray(blurred, dtype=np.float64)
    padded, window = boundary_pad(blurred, psf.shape, cfg.boundary)
    filt = wiener_filter(psf_transfer_function(psf, padded.shape), cfg.nsr)
    out = np.fft.ifft2(np.fft.fft2(padded) * filt).real[window]
    return np.clip(out, 0.0, 1.0)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def db_to_json(value: float):
    """JSON-safe dB value: infinities become ``None``."""
    return None if math.isinf(value) else value


@dataclass
class RestorationReport:
    psnr_blurred: float
    psnr_pred: float
    psnr_oracle: float
    oracle_gap: float

    def to_json(self) -> dict:
        row = {k: db_to_json(v) for k, v in asdict(self).items()}
        row["infinite"] = [k for k, v in asdict(self).items() if math.isinf(v)]
        return row


def oracle_gap_report(
    blurred: np.ndarray,
    clean: np.ndarray,
    pred_coeffs,
    true_coeffs,
    geom: PsfGeometry,
    cfg: WienerConfig | None = None,
) -> RestorationReport:
    """Restore with predicted and ground-truth PSFs and compare PSNRs.

    The gap is ``psnr_pred - psnr_oracle``; negative means the prediction
    restores worse than the oracle.
    """
    if clean is None:
        raise ValueError("oracle gap needs the clean reference image")
    cfg = cfg or WienerConfig()
    pred_psf = psf_from_coeffs(pred_coeffs, geom)
    true_psf = psf_from_coeffs(true_coeffs, geom)
    p_pred = psnr(wiener_deconvolve(blurred, pred_psf, cfg), clean)
    p_oracle = psnr(wiener_deconvolve(blurred, true_psf, cfg), clean)
    if math.isinf(p_pred) and math.isinf(p_oracle):
        gap = 0.0
    else:
        gap = p_pred - p_oracle
    return RestorationReport(psnr(blurred, clean), p_pred, p_oracle, gap)
