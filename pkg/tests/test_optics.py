import numpy as np
import pytest
from scipy import ndimage

from physzern.optics import (
    DegenerateApertureError,
    PsfGeometry,
    Wavefront,
    blur_image,
    diffraction_limited_psf,
    psf_centroid,
    psf_from_coeffs,
    psf_from_pupil,
    pupil_from_wavefront,
    strehl_ratio,
    wavefront_from_coeffs,
)
from physzern.zernike import N_COEFFS, NOLL_INDICES, PupilGrid, basis_map, noll_to_nm


def coeffs_with(**modes):
    a = np.zeros(N_COEFFS)
    for key, value in modes.items():
        a[int(key[1:]) - 2] = value
    return a


def naive_psf(pupil, pad):
    """Direct O(K^2 N^2) evaluation of the padded, centred DFT intensity."""
    n = pupil.shape[0]
    k = pad * n
    u = np.arange(k) - k // 2
    dft = np.exp(-2j * np.pi * np.outer(u, np.arange(n)) / k)
    field = dft @ pupil @ dft.T
    intensity = np.abs(field) ** 2
    return intensity / intensity.sum()


@pytest.fixture(scope="module")
def geom():
    return PsfGeometry(PupilGrid(64, 0.5), 2, None)


class TestWavefront:
    def test_zero_coefficients(self):
        grid = PupilGrid(32, 0.5)
        assert not np.any(wavefront_from_coeffs(np.zeros(N_COEFFS), grid).values)

    def test_single_mode(self):
        grid = PupilGrid(32, 0.5)
        w = wavefront_from_coeffs(coeffs_with(a4=0.5), grid)
        np.testing.assert_array_equal(w.values, 0.5 * basis_map(4, grid))

    def test_rms_follows_parseval(self):
        grid = PupilGrid(256, 0.5)
        w = wavefront_from_coeffs(coeffs_with(a4=0.1, a11=0.2), grid)
        assert float(w.rms()) == pytest.approx(np.hypot(0.1, 0.2), rel=5e-3)

    def test_linearity(self, rng):
        grid = PupilGrid(32, 0.5)
        a, b = rng.uniform(-0.2, 0.2, (2, N_COEFFS))
        lhs = wavefront_from_coeffs(2.5 * a - 1.5 * b, grid).values
        rhs = 2.5 * wavefront_from_coeffs(a, grid).values - 1.5 * wavefront_from_coeffs(b, grid).values
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_batched(self, rng):
        grid = PupilGrid(16, 0.5)
        a = rng.normal(size=(3, N_COEFFS))
        batch = wavefront_from_coeffs(a, grid).values
        assert batch.shape == (3, 16, 16)
        np.testing.assert_allclose(batch[1], wavefront_from_coeffs(a[1], grid).values, atol=1e-14)

    def test_outside_aperture_must_be_zero(self):
        grid = PupilGrid(16, 0.5)
        with pytest.raises(ValueError):
            Wavefront(np.ones((16, 16)), grid)


class TestPupil:
    def test_zero_wavefront(self):
        grid = PupilGrid(32, 0.5)
        p = pupil_from_wavefront(wavefront_from_coeffs(np.zeros(N_COEFFS), grid))
        np.testing.assert_array_equal(p, grid.mask.astype(complex))

    def test_half_wave_flips_sign(self):
        grid = PupilGrid(32, 0.5)
        p = pupil_from_wavefront(Wavefront(np.where(grid.mask, 0.5, 0.0), grid))
        np.testing.assert_allclose(p, -grid.mask.astype(float), atol=1e-15)

    def test_unit_modulus(self, rng):
        grid = PupilGrid(32, 0.5)
        p = pupil_from_wavefront(wavefront_from_coeffs(rng.uniform(-1, 1, N_COEFFS), grid))
        np.testing.assert_allclose(np.abs(p[grid.mask]), 1.0, atol=1e-14)
        assert not np.any(p[~grid.mask])


class TestPsf:
    def test_matches_direct_dft(self, rng):
        grid = PupilGrid(8, 1.0)
        w = wavefront_from_coeffs(rng.uniform(-0.3, 0.3, N_COEFFS), grid)
        p = pupil_from_wavefront(w)
        np.testing.assert_allclose(psf_from_pupil(p, 2), naive_psf(p, 2), atol=1e-15)

    def test_crop_is_central_window(self, rng):
        grid = PupilGrid(16, 0.5)
        p = pupil_from_wavefront(wavefront_from_coeffs(rng.uniform(-0.1, 0.1, N_COEFFS), grid))
        full = naive_psf(p, 2)
        crop = psf_from_pupil(p, 2, 8)
        window = full[12:20, 12:20]
        np.testing.assert_allclose(crop, window / window.sum(), atol=1e-15)

    def test_diffraction_limited_peak_at_centre(self, geom):
        psf = diffraction_limited_psf(geom)
        m = geom.size
        assert np.unravel_index(np.argmax(psf), psf.shape) == (m // 2, m // 2)

    def test_unit_sum_and_nonnegative(self, geom, rng):
        for _ in range(5):
            psf = psf_from_coeffs(rng.uniform(-0.3, 0.3, N_COEFFS), geom)
            assert abs(psf.sum() - 1.0) < 1e-9
            assert psf.min() >= 0.0

    def test_strehl_at_most_one(self, geom, rng):
        assert strehl_ratio(diffraction_limited_psf(geom), geom) == 1.0
        for _ in range(5):
            assert strehl_ratio(psf_from_coeffs(rng.uniform(-0.2, 0.2, N_COEFFS), geom), geom) <= 1.0

    def test_global_phase_invariance(self, geom, rng):
        grid = geom.grid
        w = wavefront_from_coeffs(rng.uniform(-0.2, 0.2, N_COEFFS), grid)
        shifted = Wavefront(np.where(grid.mask, w.values + 0.37, 0.0), grid)
        a = psf_from_pupil(pupil_from_wavefront(w), 2)
        b = psf_from_pupil(pupil_from_wavefront(shifted), 2)
        assert np.max(np.abs(a - b)) < 1e-10

    def test_tilt_shift_is_linear(self, geom):
        ts = np.array([0.1, 0.2, 0.3])
        cx = np.array([psf_centroid(psf_from_coeffs(coeffs_with(a2=t), geom))[0] for t in ts])
        slope, intercept = np.polyfit(ts, cx, 1)
        resid = cx - (slope * ts + intercept)
        assert np.max(np.abs(resid)) < 0.01 * np.max(np.abs(cx))
        assert abs(intercept) < 0.01 * abs(slope)

    def test_even_symmetric_aberrations_give_point_symmetric_psf(self, geom, rng):
        even = np.array([noll_to_nm(j)[1] % 2 == 0 for j in NOLL_INDICES])
        a = np.where(even, rng.uniform(-0.2, 0.2, N_COEFFS), 0.0)
        psf = psf_from_coeffs(a, geom)
        core = psf[1:, 1:]
        assert np.max(np.abs(core - core[::-1, ::-1])) < 1e-9

    def test_empty_aperture(self):
        with pytest.raises(DegenerateApertureError):
            psf_from_pupil(np.zeros((8, 8), dtype=complex), 2)

    def test_bad_pad_factor(self):
        with pytest.raises(ValueError):
            psf_from_pupil(np.ones((8, 8), dtype=complex), 0)


class TestBlur:
    @pytest.fixture
    def psf(self, geom, rng):
        return psf_from_coeffs(rng.uniform(-0.1, 0.1, N_COEFFS), PsfGeometry(geom.grid, 2, 16))

    @pytest.mark.parametrize("mode", ["circular", "edge"])
    def test_constant_image(self, psf, mode):
        out = blur_image(np.full((32, 32), 0.4), psf, mode)
        np.testing.assert_allclose(out, 0.4, atol=1e-12)

    @pytest.mark.parametrize("mode", ["circular", "edge"])
    def test_delta_kernel_is_identity(self, rng, mode):
        delta = np.zeros((9, 9))
        delta[4, 4] = 1.0
        img = rng.random((24, 24))
        np.testing.assert_allclose(blur_image(img, delta, mode), img, atol=1e-12)

    def test_impulse_returns_psf(self, psf):
        img = np.zeros((32, 32))
        img[16, 16] = 1.0
        out = blur_image(img, psf)
        np.testing.assert_allclose(out[8:24, 8:24], psf, atol=1e-15)

    def test_mean_preserved_circular(self, psf, rng):
        img = rng.random((48, 48))
        assert abs(blur_image(img, psf).mean() - img.mean()) < 1e-8

    def test_circular_matches_ndimage(self, psf, rng):
        img = rng.random((32, 32))
        np.testing.assert_allclose(blur_image(img, psf, "circular"), ndimage.convolve(img, psf, mode="wrap"), atol=1e-12)

    def test_edge_matches_ndimage(self, psf, rng):
        img = rng.random((32, 32))
        np.testing.assert_allclose(blur_image(img, psf, "edge"), ndimage.convolve(img, psf, mode="nearest"), atol=1e-12)

    def test_psf_larger_than_image(self, psf):
        with pytest.raises(ValueError):
            blur_image(np.zeros((8, 8)), psf)

    def test_unknown_mode(self, psf):
        with pytest.raises(ValueError):
            blur_image(np.zeros((32, 32)), psf, "reflect")
