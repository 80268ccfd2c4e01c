import numpy as np
import pytest

from pairscope import (
    IlluminationField,
    ObjectMask,
    OpticalParams,
    SourceProfile,
    TruncationError,
    ValidationError,
    illumination_fields,
    make_gaussian_psf,
    make_test_scene,
    psf_fwhm,
    render_classical,
    render_coincidence,
)
from pairscope.metrics import edge_profile, fit_esf
from pairscope.optics import GAUSSIAN_FWHM_PER_SIGMA


def grid_second_moment(grid):
    """Discrete central second moment along one axis (independent oracle)."""
    n = grid.shape[0]
    ax = np.arange(n) - (n - 1) / 2.0
    px = grid.sum(axis=0)
    mean = (px * ax).sum()
    return ((ax - mean) ** 2 * px).sum()


class TestPsfFwhm:
    def test_default_na_gives_published_width(self):
        params = OpticalParams()
        # 0.51 * 0.532 / 0.0936, evaluated by hand
        assert psf_fwhm(params, "classical") == pytest.approx(2.899, abs=1e-3)

    def test_biphoton_is_exactly_half(self):
        params = OpticalParams(numerical_aperture=0.51 * 0.532 / 2.9)
        classical = psf_fwhm(params, "classical")
        assert classical == pytest.approx(2.9, rel=1e-12)
        assert psf_fwhm(params, "biphoton") == classical / 2.0
        assert psf_fwhm(params, "biphoton") == pytest.approx(1.45, rel=1e-12)

    def test_deterministic(self):
        params = OpticalParams()
        assert psf_fwhm(params, "classical") == psf_fwhm(params, "classical")

    def test_invalid_parameters(self):
        with pytest.raises(ValidationError):
            OpticalParams(wavelength_um=0.0)
        with pytest.raises(ValidationError):
            OpticalParams(numerical_aperture=1.5)
        with pytest.raises(ValidationError):
            psf_fwhm(OpticalParams(), "airy")

    def test_width_scale_multiplies_both_kinds(self):
        base = OpticalParams()
        wide = OpticalParams(psf_width_scale=1.5)
        assert psf_fwhm(wide, "classical") == pytest.approx(1.5 * psf_fwhm(base, "classical"))
        assert psf_fwhm(wide, "biphoton") == pytest.approx(1.5 * psf_fwhm(base, "biphoton"))


class TestGaussianPsf:
    def test_sigma_one_pixel(self):
        # fwhm = 2*sqrt(2 ln 2) * pitch means sigma is exactly one pixel
        fwhm = GAUSSIAN_FWHM_PER_SIGMA * 0.5
        k = make_gaussian_psf(fwhm, 0.5)
        assert k.sigma_px == pytest.approx(1.0, rel=1e-12)
        assert grid_second_moment(k.grid) == pytest.approx(1.0, rel=1e-3)

    def test_unit_sum(self):
        for fwhm in (0.7, 2.3, 9.0):
            k = make_gaussian_psf(fwhm, 1.0)
            assert abs(k.grid.sum() - 1.0) <= 1e-9

    def test_halved_fwhm_quarters_second_moment(self):
        wide = make_gaussian_psf(4.0, 1.0, support_radius_px=16)
        narrow = make_gaussian_psf(2.0, 1.0, support_radius_px=16)
        ratio = grid_second_moment(narrow.grid) / grid_second_moment(wide.grid)
        assert ratio == pytest.approx(0.25, rel=1e-3)

    def test_truncation_error(self):
        with pytest.raises(TruncationError):
            make_gaussian_psf(10.0, 1.0, support_radius_px=4)  # sigma ~ 4.25 px

    def test_kernel_is_nonnegative(self):
        k = make_gaussian_psf(3.0, 1.0)
        assert k.grid.min() >= 0.0


class TestIllumination:
    def test_uniform_source_gives_constant_interior(self):
        source = SourceProfile(intensity=np.ones((64, 64)))
        k = make_gaussian_psf(3.0, 1.0)
        kb = make_gaussian_psf(1.5, 1.0)
        illum = illumination_fields(source, k, kb)
        inner = (slice(20, 44), slice(20, 44))
        for field in (illum.classical, illum.biphoton):
            rel = np.ptp(field[inner]) / field[inner].mean()
            assert rel < 1e-6

    def test_point_source_reproduces_kernel(self):
        n = 33
        intensity = np.zeros((n, n))
        intensity[n // 2, n // 2] = 1.0
        k = make_gaussian_psf(3.0, 1.0, support_radius_px=10)
        illum = illumination_fields(SourceProfile(intensity=intensity), k, k)
        r = 10
        c = n // 2
        sub = illum.classical[c - r : c + r + 1, c - r : c + r + 1]
        assert np.allclose(sub, k.grid, atol=1e-12)

    def test_gaussian_source_variance_adds(self):
        n = 129
        ax = np.arange(n) - n // 2
        sig_src = 4.0
        profile = np.exp(-(ax**2) / (2 * sig_src**2))
        intensity = np.outer(profile, profile)
        k = make_gaussian_psf(GAUSSIAN_FWHM_PER_SIGMA * 3.0, 1.0)  # sigma 3 px
        illum = illumination_fields(SourceProfile(intensity=intensity), k, k)
        var = grid_second_moment(illum.classical / illum.classical.sum())
        assert var == pytest.approx(sig_src**2 + 9.0, rel=2e-2)


def _edge_setup(pitch=0.25, width=240, height=40, fwhm=2.9):
    mask = make_test_scene("edge", (height, width), pitch, edge_x_um=width * pitch / 2)
    k_classical = make_gaussian_psf(fwhm, pitch)
    k_biphoton = make_gaussian_psf(fwhm / 2, pitch, kind="biphoton")
    illum = IlluminationField.uniform((height, width))
    return mask, illum, k_classical, k_biphoton


def _fit_interior(values, pitch, kernel):
    """Fit the edge profile away from the zero-padded field boundary."""
    trim = kernel.grid.shape[0] // 2 + 2
    profile = edge_profile(values)[trim:-trim]
    x = (np.arange(values.shape[1]) * pitch)[trim:-trim]
    return fit_esf(profile, x=x)


class TestRenders:
    def test_uniform_scene_constant(self):
        mask = ObjectMask(transmission=np.ones((40, 40)), pixel_pitch_um=1.0)
        illum = IlluminationField.uniform((40, 40))
        k = make_gaussian_psf(2.0, 1.0)
        img = render_classical(mask, illum, k)
        inner = img.values[10:30, 10:30]
        assert np.ptp(inner) / inner.mean() < 1e-6

    def test_opaque_scene_is_dark(self):
        mask = ObjectMask(transmission=np.zeros((30, 30)), pixel_pitch_um=1.0)
        illum = IlluminationField.uniform((30, 30))
        k = make_gaussian_psf(2.0, 1.0)
        assert np.all(render_classical(mask, illum, k).values == 0.0)

    def test_classical_edge_fwhm_matches_kernel(self):
        mask, illum, kc, kb = _edge_setup()
        img = render_classical(mask, illum, kc)
        fit = _fit_interior(img.values, 0.25, kc)
        assert fit.converged
        assert fit.fwhm == pytest.approx(kc.fwhm_um, rel=0.02)

    def test_coincidence_edge_fwhm_is_half(self):
        mask, illum, kc, kb = _edge_setup()
        classical = render_classical(mask, illum, kc)
        pair = render_coincidence(mask, illum, kb)
        fit_c = _fit_interior(classical.values, 0.25, kc)
        fit_b = _fit_interior(pair.values, 0.25, kc)
        assert fit_b.converged
        assert fit_b.fwhm / fit_c.fwhm == pytest.approx(0.5, abs=0.02)

    def test_two_bar_scene_resolved_only_by_coincidence(self):
        # Two thin bars with a gap of 0.7x the classical FWHM: below the
        # classical resolution, above the coincidence one.
        pitch = 0.1
        fwhm = 2.9
        gap = 0.7 * fwhm
        bar = 0.1 * fwhm
        width, height = 360, 8
        xc = (np.arange(width) + 0.5) * pitch
        center = width * pitch / 2
        t = np.zeros((height, width))
        for lo in (center - gap / 2 - bar, center + gap / 2):
            t[:, (xc >= lo) & (xc < lo + bar)] = 1.0
        mask = ObjectMask(transmission=t, pixel_pitch_um=pitch)
        illum = IlluminationField.uniform((height, width))
        kc = make_gaussian_psf(fwhm, pitch)
        kb = make_gaussian_psf(fwhm / 2, pitch, kind="biphoton")

        mid = width // 2
        span = int((bar + gap) / pitch)

        def center_dip(values):
            profile = values.mean(axis=0)
            peak = profile[mid - span : mid + span].max()
            return (peak - profile[mid]) / peak

        classical_dip = center_dip(render_classical(mask, illum, kc).values)
        pair_dip = center_dip(render_coincidence(mask, illum, kb).values)
        assert classical_dip < 0.01
        assert pair_dip > 0.3

    def test_monotone_masking(self, rng):
        t2 = rng.random((30, 30))
        t1 = t2 * rng.random((30, 30))
        illum = IlluminationField.uniform((30, 30))
        k = make_gaussian_psf(2.0, 1.0)
        img1 = render_classical(ObjectMask(t1, 1.0), illum, k).values
        img2 = render_classical(ObjectMask(t2, 1.0), illum, k).values
        assert np.all(img1 <= img2 + 1e-12)

    def test_render_core_shared(self):
        # Handing the coincidence render the classical inputs reproduces the
        # classical render exactly: one convolution core.
        mask, illum, kc, _ = _edge_setup(width=80, height=16)
        same_illum = IlluminationField(classical=illum.classical, biphoton=illum.classical)
        a = render_classical(mask, same_illum, kc).values
        b = render_coincidence(mask, same_illum, kc).values
        assert np.array_equal(a, b)


class TestScenes:
    def test_edge_binary(self):
        mask = make_test_scene("edge", (8, 16), 1.0, edge_x_um=8.0)
        t = mask.transmission
        assert set(np.unique(t)) <= {0.0, 1.0}
        assert np.all(t[:, :8] == 0.0)
        assert np.all(t[:, 8:] == 1.0)

    def test_bars_geometry(self):
        # Three bars of width 2.76 um on a 2x pitch, like the finest
        # resolution-target group.
        pitch = 0.23
        mask = make_test_scene("bars", (4, 120), pitch, bar_width_um=2.76, count=3)
        cols = mask.transmission[0]
        transitions = np.flatnonzero(np.diff(cols) != 0) + 1
        assert len(transitions) == 6  # three rising and three falling edges
        widths = np.diff(transitions)[::2] * pitch
        gaps = np.diff(transitions)[1::2] * pitch
        assert np.allclose(widths, 2.76, atol=pitch)
        assert np.allclose(gaps, 2.76, atol=pitch)

    def test_fibers_deterministic(self):
        a = make_test_scene("fibers", (32, 32), 1.0, count=3, width_um=6.0, seed=9)
        b = make_test_scene("fibers", (32, 32), 1.0, count=3, width_um=6.0, seed=9)
        c = make_test_scene("fibers", (32, 32), 1.0, count=3, width_um=6.0, seed=10)
        assert np.array_equal(a.transmission, b.transmission)
        assert not np.array_equal(a.transmission, c.transmission)

    def test_fiber_width(self):
        mask = make_test_scene("fibers", (64, 64), 1.0, count=1, width_um=6.0, seed=2)
        # Strip area ~ width * length; length >= FOV side for a crossing strip
        area = mask.transmission.sum()
        assert area >= 6.0 * 32

    def test_import_pgm_roundtrip(self, tmp_path):
        from pairscope.formats import write_pgm

        values = (np.arange(48, dtype=np.uint16).reshape(6, 8) * 1000)
        path = tmp_path / "scene.pgm"
        write_pgm(path, values)
        mask = make_test_scene("import", (6, 8), 1.0, path=str(path))
        assert mask.transmission.max() <= 1.0
        assert mask.transmission.min() == 0.0
        assert mask.transmission[5, 7] == pytest.approx(47000 / 65535)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            make_test_scene("checkerboard", (8, 8), 1.0)
