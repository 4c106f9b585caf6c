"""Noll-indexed Zernike basis on a square pupil grid.

Modes are Noll-normalized (unit RMS over the unit disk), which is also the
convention of the Zemax "Standard Zernike" coefficients.  Coefficient
vectors hold the 36 modes j = 2..37; piston is never part of a vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import factorial

import numpy as np

J_MIN = 2
J_MAX = 37
N_COEFFS = J_MAX - J_MIN + 1
NOLL_INDICES = tuple(range(J_MIN, J_MAX + 1))


def noll_to_nm(j: int) -> tuple[int, int]:
    """Map a Noll index to its radial degree ``n`` and signed frequency ``m``.

    Within a radial degree, ``|m|`` ascends; even ``j`` carries the cosine
    term (``m > 0``) and odd ``j`` the sine term (``m < 0``).

    Raises
    ------
    IndexError
        If ``j`` is outside ``1..37``.
    """
    j = int(j)
    if not 1 <= j <= J_MAX:
        raise IndexError(f"Noll index must be in 1..{J_MAX}, got {j}")
    n = 0
    while (n + 1) * (n + 2) // 2 < j:
        n += 1
    pos = j - n * (n + 1) // 2  # 1-based position within degree n
    if n % 2 == 0:
        m_abs = 2 * (pos // 2)
    else:
        m_abs = 2 * ((pos - 1) // 2) + 1
    if m_abs == 0:
        return n, 0
    return n, (m_abs if j % 2 == 0 else -m_abs)


def nm_to_noll(n: int, m: int) -> int:
    """Inverse of :func:`noll_to_nm` for indices up to 37."""
    for j in range(1, J_MAX + 1):
        if noll_to_nm(j) == (n, m):
            return j
    raise IndexError(f"(n={n}, m={m}) has no Noll index <= {J_MAX}")


def _check_nm(n: int, m_abs: int) -> None:
    if n < 0 or m_abs < 0 or m_abs > n or (n - m_abs) % 2:
        raise ValueError(f"invalid radial indices n={n}, |m|={m_abs}")


@lru_cache(maxsize=None)
def radial_coefficients(n: int, m_abs: int) -> tuple[tuple[int, int], ...]:
    """(power, coefficient) pairs of the factorial-sum form of R_n^|m|."""
    _check_nm(n, m_abs)
    terms = []
    for k in range((n - m_abs) // 2 + 1):
        c = (-1) ** k * factorial(n - k) // (
            factorial(k) * factorial((n + m_abs) // 2 - k) * factorial((n - m_abs) // 2 - k)
        )
        terms.append((n - 2 * k, c))
    return tuple(terms)


def radial_polynomial(n: int, m_abs: int, rho):
    """Evaluate R_n^|m|(rho); scalar in, scalar out, arrays broadcast."""
    terms = radial_coefficients(n, m_abs)
    rho = np.asarray(rho, dtype=np.float64)
    out = np.zeros_like(rho)
    for power, c in terms:
        out = out + c * rho**power
    return out[()] if out.ndim == 0 else out


def noll_norm(n: int, m: int) -> float:
    return float(np.sqrt(n + 1) if m == 0 else np.sqrt(2 * (n + 1)))


@dataclass(frozen=True)
class PupilGrid:
    """Square sampling of the pupil plane.

    Pixel ``i`` sits at ``x = (i - n/2) / (aperture_fraction * n/2)`` so the
    pupil disk is centred on pixel ``n/2`` and reaches ``aperture_fraction``
    of the half-width.  Rows index ``y``, columns index ``x``.
    """

    n_samples: int = 128
    aperture_fraction: float = 0.5
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if self.n_samples < 2 or self.n_samples % 2:
            raise ValueError(f"n_samples must be even and >= 2, got {self.n_samples}")
        if not 0.0 < self.aperture_fraction <= 1.0:
            raise ValueError(f"aperture_fraction must be in (0, 1], got {self.aperture_fraction}")

    @property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        if "xy" not in self._cache:
            half = self.n_samples / 2
            t = (np.arange(self.n_samples) - half) / (self.aperture_fraction * half)
            x, y = np.meshgrid(t, t)
            x.flags.writeable = False
            y.flags.writeable = False
            self._cache["xy"] = (x, y)
        return self._cache["xy"]

    @property
    def polar(self) -> tuple[np.ndarray, np.ndarray]:
        x, y = self.coords
        return np.hypot(x, y), np.arctan2(y, x)

    @property
    def mask(self) -> np.ndarray:
        if "mask" not in self._cache:
            rho, _ = self.polar
            m = rho <= 1.0
            m.flags.writeable = False
            self._cache["mask"] = m
        return self._cache["mask"]

    @property
    def area(self) -> int:
        """Number of pixels inside the aperture."""
        return int(self.mask.sum())

    def basis(self) -> np.ndarray:
        """Stack of modes j = 2..37, shape ``(36, n, n)``, read-only."""
        if "basis" not in self._cache:
            b = np.stack([basis_map(j, self) for j in NOLL_INDICES])
            b.flags.writeable = False
            self._cache["basis"] = b
        return self._cache["basis"]

    def basis_matrix(self) -> np.ndarray:
        """Modes restricted to aperture pixels, shape ``(36, area)``."""
        if "bmat" not in self._cache:
            bm = self.basis()[:, self.mask]
            bm.flags.writeable = False
            self._cache["bmat"] = bm
        return self._cache["bmat"]


def basis_map(j: int, grid: PupilGrid) -> np.ndarray:
    """Noll-normalized mode ``Z_j`` sampled on ``grid``, zero outside the disk."""
    n, m = noll_to_nm(j)
    rho, theta = grid.polar
    z = noll_norm(n, m) * radial_polynomial(n, abs(m), rho)
    if m > 0:
        z = z * np.cos(m * theta)
    elif m < 0:
        z = z * np.sin(-m * theta)
    return np.where(grid.mask, z, 0.0)


def gram_matrix(grid: PupilGrid, j_min: int = J_MIN, j_max: int = J_MAX) -> np.ndarray:
    """Discrete inner products ``(1/A) sum Z_i Z_j`` over aperture pixels."""
    b = np.stack([basis_map(j, grid)[grid.mask] for j in range(j_min, j_max + 1)])
    return b @ b.T / grid.area


def check_coeffs(coeffs) -> np.ndarray:
    """Validate a coefficient vector (or batch) and return it as float64."""
    a = np.asarray(coeffs, dtype=np.float64)
    if a.shape[-1] != N_COEFFS:
        raise ValueError(f"expected {N_COEFFS} coefficients (j=2..37), got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("coefficients must be finite")
    return a
