import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import eval_jacobi

from physzern.zernike import (
    N_COEFFS,
    NOLL_INDICES,
    PupilGrid,
    basis_map,
    check_coeffs,
    gram_matrix,
    nm_to_noll,
    noll_to_nm,
    radial_polynomial,
)


def brute_force_noll(j_max=37):
    """Walk radial degrees and |m| in ascending order, handing out indices by Noll's parity rule."""
    table = {}
    j = 1
    n = 0
    while j <= j_max:
        for m_abs in range(n % 2, n + 1, 2):
            if m_abs == 0:
                table[j] = (n, 0)
                j += 1
            else:
                for jj in (j, j + 1):
                    table[jj] = (n, m_abs if jj % 2 == 0 else -m_abs)
                j += 2
        n += 1
    return {k: v for k, v in table.items() if k <= j_max}


def jacobi_radial(n, m_abs, rho):
    """Radial polynomial through its Jacobi-polynomial representation."""
    k = (n - m_abs) // 2
    return (-1) ** k * rho**m_abs * eval_jacobi(k, m_abs, 0, 1.0 - 2.0 * rho**2)


VALID_NM = [(n, m) for n in range(8) for m in range(n % 2, n + 1, 2)]


class TestNollIndex:
    def test_piston_first(self):
        assert noll_to_nm(1) == (0, 0)

    @pytest.mark.parametrize("j, nm", [(4, (2, 0)), (11, (4, 0))])
    def test_named_modes(self, j, nm):
        assert noll_to_nm(j) == nm

    def test_matches_enumeration(self):
        oracle = brute_force_noll()
        assert {j: noll_to_nm(j) for j in range(1, 38)} == oracle

    @pytest.mark.parametrize("j", [0, -3, 38, 100])
    def test_out_of_range(self, j):
        with pytest.raises(IndexError):
            noll_to_nm(j)

    def test_bijection(self):
        pairs = [noll_to_nm(j) for j in range(1, 38)]
        assert len(set(pairs)) == 37
        assert [nm_to_noll(n, m) for n, m in pairs] == list(range(1, 38))

    def test_parity_rule(self):
        for j in range(2, 38):
            n, m = noll_to_nm(j)
            assert n >= abs(m) and (n - abs(m)) % 2 == 0
            if m != 0:
                assert (m > 0) == (j % 2 == 0)


class TestRadialPolynomial:
    def test_constant(self):
        assert radial_polynomial(0, 0, 0.5) == 1.0

    def test_defocus(self):
        assert radial_polynomial(2, 0, 1.0) == 1.0
        assert radial_polynomial(2, 0, 0.5) == pytest.approx(-0.5, abs=1e-15)

    @pytest.mark.parametrize("n, m", VALID_NM)
    def test_unity_at_edge(self, n, m):
        assert radial_polynomial(n, m, 1.0) == pytest.approx(1.0, abs=1e-13)

    @pytest.mark.parametrize("n, m", VALID_NM)
    def test_matches_jacobi(self, n, m):
        rho = np.linspace(0.0, 1.0, 41)
        np.testing.assert_allclose(radial_polynomial(n, m, rho), jacobi_radial(n, m, rho), atol=1e-12)

    @pytest.mark.parametrize("n, m", [(2, 1), (1, 2), (3, 0), (-1, 1)])
    def test_invalid_indices(self, n, m):
        with pytest.raises(ValueError):
            radial_polynomial(n, m, 0.3)

    @given(st.floats(0.0, 1.0))
    def test_bounded_on_disk(self, rho):
        for n, m in VALID_NM:
            assert abs(radial_polynomial(n, m, rho)) <= 1.0 + 1e-12


class TestPupilGrid:
    def test_coordinate_convention(self):
        grid = PupilGrid(8, 0.5)
        x, y = grid.coords
        assert x[0, 0] == pytest.approx(-4 / 2.0)
        assert x[0, 4] == 0.0 and y[4, 0] == 0.0
        assert x[0, 5] == pytest.approx(1 / 2.0)

    def test_mask_is_closed_disk(self):
        grid = PupilGrid(64, 1.0)
        rho, _ = grid.polar
        assert np.array_equal(grid.mask, rho <= 1.0)
        assert grid.area == int(np.count_nonzero(grid.mask))

    @pytest.mark.parametrize("n, af", [(7, 0.5), (64, 0.0), (64, 1.5)])
    def test_rejects_bad_geometry(self, n, af):
        with pytest.raises(ValueError):
            PupilGrid(n, af)

    def test_basis_is_read_only(self):
        basis = PupilGrid(16, 1.0).basis()
        assert basis.shape == (N_COEFFS, 16, 16)
        with pytest.raises(ValueError):
            basis[0, 0, 0] = 1.0


class TestBasisMap:
    def test_piston_constant(self):
        grid = PupilGrid(32, 0.5)
        z1 = basis_map(1, grid)
        assert np.all(z1[grid.mask] == 1.0)
        assert np.all(z1[~grid.mask] == 0.0)

    def test_defocus_at_centre(self):
        grid = PupilGrid(64, 0.5)
        assert basis_map(4, grid)[32, 32] == pytest.approx(-math.sqrt(3.0), abs=1e-14)

    def test_defocus_tilt_orthogonal(self):
        grid = PupilGrid(128, 0.5)
        z4, z6 = basis_map(4, grid), basis_map(6, grid)
        assert abs(np.sum(z4 * z6) / grid.area) < 1e-2

    @pytest.mark.parametrize("j", [2, 3, 5, 8, 12, 23, 37])
    def test_matches_closed_form(self, j):
        grid = PupilGrid(48, 0.75)
        x, y = grid.coords
        rho, theta = np.hypot(x, y), np.arctan2(y, x)
        n, m = noll_to_nm(j)
        norm = math.sqrt(n + 1) if m == 0 else math.sqrt(2 * (n + 1))
        ang = 1.0 if m == 0 else (np.cos(m * theta) if m > 0 else np.sin(-m * theta))
        expected = np.where(rho <= 1.0, norm * jacobi_radial(n, abs(m), np.minimum(rho, 1.0)) * ang, 0.0)
        np.testing.assert_allclose(basis_map(j, grid), expected, atol=1e-11)

    def test_x_tilt_increases_along_x(self):
        grid = PupilGrid(32, 1.0)
        z2 = basis_map(2, grid)
        assert z2[16, 20] > 0 > z2[16, 12]
        assert basis_map(3, grid)[20, 16] > 0


class TestOrthonormality:
    @pytest.mark.parametrize("n", [128, 256])
    def test_close_to_identity(self, n):
        g = gram_matrix(PupilGrid(n, 0.5))
        assert g.shape == (N_COEFFS, N_COEFFS)
        assert np.max(np.abs(g - np.eye(N_COEFFS))) < 0.05

    def test_error_shrinks_with_resolution(self):
        errs = [np.max(np.abs(gram_matrix(PupilGrid(n, 0.5)) - np.eye(N_COEFFS))) for n in (128, 256, 512)]
        assert errs[0] > errs[1] > errs[2]


class TestCheckCoeffs:
    def test_accepts_batches(self):
        assert check_coeffs(np.zeros((3, N_COEFFS))).shape == (3, N_COEFFS)

    @pytest.mark.parametrize("bad", [np.zeros(35), np.full(N_COEFFS, np.nan), np.full(N_COEFFS, np.inf)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            check_coeffs(bad)

    def test_index_table(self):
        assert NOLL_INDICES[0] == 2 and NOLL_INDICES[-1] == 37
