"""Analytic gradients of the wavefront and PSF losses w.r.t. Zernike coefficients.

The PSF gradient is the hand-written adjoint of the forward model in
:mod:`physzern.optics`::

    a -> W = a.Z -> P = mask exp(2 pi i W) -> E = crop(shift(DFT(pad(P))))
      -> I = |E|^2 -> psf = I / sum(I) -> loss = sum((psf - target)^2)

The PSF loss is the per-pixel mean squared error multiplied by the pixel
count ``M**2`` (equivalently the sum of squared residuals).  PSF values are
O(1/M**2), so the rescale keeps gradients O(1); minimizers are unchanged.

All functions accept a single coefficient vector or a ``(B, 36)`` batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .optics import (
    DegenerateApertureError,
    PsfGeometry,
    Wavefront,
    pupil_field,
)
from .zernike import N_COEFFS, PupilGrid, check_coeffs

log = logging.getLogger(__name__)


class RecoveryDivergedError(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}")
        self.iteration = iteration


def _target_values(target_w: Wavefront | np.ndarray, grid: PupilGrid) -> np.ndarray:
    if isinstance(target_w, Wavefront):
        if target_w.grid != grid:
            raise ValueError(f"target wavefront grid {target_w.grid} != {grid}")
        return target_w.values
    target_w = np.asarray(target_w, dtype=np.float64)
    if target_w.shape[-2:] != (grid.n_samples, grid.n_samples):
        raise ValueError(f"target wavefront shape {target_w.shape} does not match grid")
    return target_w


def wave_loss_and_grad(pred, target_w: Wavefront | np.ndarray, grid: PupilGrid):
    """Mean squared wavefront error over aperture pixels and its gradient.

    Returns
    -------
    loss : float or ndarray (B,)
    grad : ndarray (36,) or (B, 36)
    """
    a = check_coeffs(pred)
    bmat = grid.basis_matrix()
    target = _target_values(target_w, grid)[..., grid.mask]
    resid = a @ bmat - target
    area = grid.area
    loss = np.mean(resid**2, axis=-1)
    grad = (2.0 / area) * resid @ bmat.T
    return loss, grad


def wave_loss(pred, target_w, grid: PupilGrid):
    return wave_loss_and_grad(pred, target_w, grid)[0]


def _forward(a: np.ndarray, geom: PsfGeometry):
    grid = geom.grid
    w = np.tensordot(a, grid.basis(), axes=([-1], [0]))
    pupil = np.where(grid.mask, np.exp(2j * np.pi * w), 0.0)
    k = geom.field_size
    e = np.fft.fftshift(np.fft.fft2(pupil_field(pupil, k)), axes=(-2, -1))
    s = geom.crop_slice
    e = e[..., s, s]
    intensity = e.real**2 + e.imag**2
    total = intensity.sum(axis=(-2, -1), keepdims=True)
    if np.any(total <= 0.0):
        raise DegenerateApertureError("pupil has zero transmitted energy")
    return pupil, e, total, intensity / total


def psf_loss(pred, target_psf: np.ndarray, geom: PsfGeometry):
    a = check_coeffs(pred)
    psf = _forward(a, geom)[3]
    return np.sum((psf - target_psf) ** 2, axis=(-2, -1))


def psf_loss_and_wavefront_grad(pred, target_psf: np.ndarray, geom: PsfGeometry):
    """PSF loss and its gradient with respect to the wavefront (waves).

    The gradient is returned on aperture pixels only, shape ``(..., area)``.
    """
    a = check_coeffs(pred)
    target_psf = np.asarray(target_psf, dtype=np.float64)
    if target_psf.shape[-2:] != (geom.size, geom.size):
        raise ValueError(f"target PSF shape {target_psf.shape} != crop size {geom.size}")
    pupil, e, total, psf = _forward(a, geom)
    resid = psf - target_psf
    loss = np.sum(resid**2, axis=(-2, -1))

    g_psf = 2.0 * resid
    # quotient rule through psf = I / sum(I)
    g_int = (g_psf - np.sum(g_psf * psf, axis=(-2, -1), keepdims=True)) / total
    g_e = 2.0 * e * g_int
    k = geom.field_size
    g_full = np.zeros(g_e.shape[:-2] + (k, k), dtype=np.complex128)
    s = geom.crop_slice
    g_full[..., s, s] = g_e
    # adjoint of the unnormalized forward DFT is k**2 * ifft2
    g_field = np.fft.ifft2(np.fft.ifftshift(g_full, axes=(-2, -1))) * (k * k)
    n = geom.grid.n_samples
    g_pupil = g_field[..., :n, :n]
    g_phase = np.imag(np.conj(pupil) * g_pupil)
    return loss, 2.0 * np.pi * g_phase[..., geom.grid.mask]


def psf_loss_and_grad(pred, target_psf: np.ndarray, geom: PsfGeometry):
    """PSF loss (sum of squared unit-sum-PSF residuals) and its exact gradient.

    Parameters
    ----------
    pred : array_like, (36,) or (B, 36)
        Coefficients in waves.
    target_psf : ndarray, (M, M) or (B, M, M)
        Unit-sum target PSF on the same focal geometry.
    geom : PsfGeometry

    Returns
    -------
    loss : float or ndarray (B,)
    grad : ndarray (36,) or (B, 36)
    """
    loss, g_w = psf_loss_and_wavefront_grad(pred, target_psf, geom)
    return loss, g_w @ geom.grid.basis_matrix().T


def finite_difference_grad(fun, a, step: float) -> np.ndarray:
    """Central differences of a scalar function of a coefficient vector."""
    a = np.asarray(a, dtype=np.float64)
    g = np.empty_like(a)
    for i in range(a.size):
        up = a.copy()
        dn = a.copy()
        up[i] += step
        dn[i] -= step
        g[i] = (fun(up) - fun(dn)) / (2.0 * step)
    return g


def twin_coeffs(coeffs) -> np.ndarray:
    """Coefficients of the point-reflected, sign-flipped wavefront ``-W(-r)``.

    This twin yields exactly the same intensity PSF: even-m modes flip sign,
    odd-m modes are unchanged.
    """
    from .zernike import NOLL_INDICES, noll_to_nm

    a = check_coeffs(coeffs).copy()
    even = np.array([noll_to_nm(j)[1] % 2 == 0 for j in NOLL_INDICES])
    a[..., even] *= -1.0
    return a


@dataclass
class RecoverConfig:
    """Settings for :func:`recover_coefficients`.

    ``jitter`` perturbs every start by a seeded offset so that even-m modes
    can leave the symmetric saddle at zero; the unperturbed ``init`` is still
    evaluated and returned if nothing better is found.
    """

    n_samples: int = 64
    aperture_fraction: float = 0.5
    pad_factor: int = 2
    crop: int | None = None
    max_iter: int = 500
    momentum: float = 0.9
    step0: float = 1e-2
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    n_starts: int = 1
    start_scale: float = 0.05
    jitter: float = 1e-3
    seed: int = 0
    loss_tol: float = 1e-22
    wave_weight: float = 0.0
    init: list[float] | None = field(default=None)

    def geometry(self) -> PsfGeometry:
        return PsfGeometry(PupilGrid(self.n_samples, self.aperture_fraction), self.pad_factor, self.crop)


@dataclass
class RecoveryResult:
    coeffs: np.ndarray
    loss: float
    init_loss: float
    trace: list[dict]
    start_losses: list[float]


def _objective(geom, observed_psf, target_w, wave_weight):
    def f(a, need_grad=True):
        if need_grad:
            loss, grad = psf_loss_and_grad(a, observed_psf, geom)
        else:
            loss, grad = psf_loss(a, observed_psf, geom), None
        if wave_weight > 0.0 and target_w is not None:
            wl, wg = wave_loss_and_grad(a, target_w, geom.grid)
            loss = loss + wave_weight * wl
            if need_grad:
                grad = grad + wave_weight * wg
        return float(loss), grad

    return f


def _descend(f, a0, cfg: RecoverConfig, it0: int, trace: list, best: list):
    a = a0.copy()
    loss, g = f(a)
    if not np.isfinite(loss):
        raise RecoveryDivergedError(it0, loss)
    d = np.zeros_like(a)
    step = cfg.step0
    for it in range(cfg.max_iter):
        gnorm = float(np.linalg.norm(g))
        if loss < best[0]:
            best[0], best[1] = loss, a.copy()
        trace.append({"iter": it0 + it, "loss": best[0], "grad_norm": gnorm})
        if loss <= cfg.loss_tol or gnorm == 0.0:
            break
        d = cfg.momentum * d + g
        slope = float(g @ d)
        if slope <= 0.0:
            d = g.copy()
            slope = gnorm**2
        t = step
        for _ in range(cfg.max_backtracks):
            trial = a - t * d
            new_loss, _ = f(trial, need_grad=False)
            if not np.isfinite(new_loss):
                raise RecoveryDivergedError(it0 + it, new_loss)
            if new_loss <= loss - cfg.armijo * t * slope:
                break
            t *= cfg.backtrack
        else:
            # no acceptable step along the momentum direction: restart it
            d = np.zeros_like(a)
            continue
        a = trial
        loss, g = f(a)
        if not np.isfinite(loss):
            raise RecoveryDivergedError(it0 + it, loss)
        step = t * 2.0
    if loss < best[0]:
        best[0], best[1] = loss, a.copy()
    return it0 + cfg.max_iter


def recover_coefficients(
    observed_psf: np.ndarray,
    cfg: RecoverConfig | None = None,
    target_wavefront: Wavefront | None = None,
) -> RecoveryResult:
    """Fit coefficients to an observed PSF by gradient descent with momentum.

    Each start runs at most ``cfg.max_iter`` iterations; the best iterate over
    all starts (and the raw initialization) is returned.  Remaining starts are
    skipped once the loss reaches ``cfg.loss_tol``.  The trace records the
    best loss seen so far, so it is monotone non-increasing.

    Intensity PSFs cannot distinguish a wavefront from its twin ``-W(-r)``
    (see :func:`twin_coeffs`); which twin is returned depends on the start.
    """
    cfg = cfg or RecoverConfig()
    geom = cfg.geometry()
    observed_psf = np.asarray(observed_psf, dtype=np.float64)
    f = _objective(geom, observed_psf, target_wavefront, cfg.wave_weight)
    init = np.zeros(N_COEFFS) if cfg.init is None else check_coeffs(cfg.init).copy()
    init_loss, _ = f(init, need_grad=False)
    if not np.isfinite(init_loss):
        raise RecoveryDivergedError(0, init_loss)
    rng = np.random.default_rng(cfg.seed)
    best = [init_loss, init.copy()]
    trace: list[dict] = []
    start_losses = []
    it = 0
    for k in range(cfg.n_starts):
        if best[0] <= cfg.loss_tol:
            break
        a0 = init if k == 0 else init + rng.uniform(-cfg.start_scale, cfg.start_scale, N_COEFFS)
        a0 = a0 + rng.uniform(-cfg.jitter, cfg.jitter, N_COEFFS)
        before = best[0]
        best_k = [np.inf, None]
        it = _descend(f, a0, cfg, it, trace, best_k)
        start_losses.append(best_k[0])
        if best_k[0] < before:
            best[0], best[1] = best_k
        log.debug("start %d: loss %.3e", k, best_k[0])
    for row in trace:
        row["loss"] = min(row["loss"], init_loss)
    running = np.inf
    for row in trace:
        running = min(running, row["loss"])
        row["loss"] = running
    return RecoveryResult(best[1], best[0], init_loss, trace, start_losses)
