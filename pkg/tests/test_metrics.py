import numpy as np
import pytest
from scipy.special import erf

import pairscope as ps
from pairscope.metrics import RESOLUTION_PER_W

from conftest import make_plan


class TestNormalize:
    def test_hand_case(self):
        out = ps.normalize(np.array([[2.0, 4.0, 6.0]]))
        assert np.allclose(out, [[0.0, 0.5, 1.0]])

    def test_constant_rejected(self):
        with pytest.raises(ps.DegenerateImageError):
            ps.normalize(np.full((4, 4), 3.3))

    def test_idempotent(self, rng):
        img = rng.random((12, 12))
        once = ps.normalize(img)
        assert np.array_equal(ps.normalize(once), once)

    def test_non_finite_rejected(self):
        with pytest.raises(ps.ValidationError):
            ps.normalize(np.array([[1.0, np.nan]]))


class TestCnr:
    def test_hand_case(self):
        from pairscope.metrics import cnr_samples

        # mean diff 2, sample variances 2 and 0 -> 2/sqrt(2)
        assert cnr_samples([1.0, 3.0], [0.0, 0.0, 0.0]) == pytest.approx(np.sqrt(2.0))

    def test_roi_case_matches_samples(self, rng):
        from pairscope.metrics import cnr_samples

        img = rng.random((8, 12))
        roi1, roi2 = ps.Roi(0, 0, 3, 3), ps.Roi(6, 4, 4, 3)
        assert ps.cnr(img, roi1, roi2) == pytest.approx(
            cnr_samples(img[0:3, 0:3], img[4:7, 6:10])
        )

    def test_identical_regions_zero(self, rng):
        img = np.zeros((8, 12))
        block = rng.random((8, 4))
        img[:, 0:4] = block
        img[:, 8:12] = block
        assert ps.cnr(img, ps.Roi(0, 0, 4, 8), ps.Roi(8, 0, 4, 8)) == 0.0

    def test_both_constant_rejected(self):
        img = np.ones((6, 6))
        with pytest.raises(ps.UndefinedCnrError):
            ps.cnr(img, ps.Roi(0, 0, 2, 2), ps.Roi(4, 4, 2, 2))

    def test_overlap_rejected(self):
        img = np.zeros((6, 6))
        with pytest.raises(ps.ValidationError):
            ps.cnr(img, ps.Roi(0, 0, 4, 4), ps.Roi(2, 2, 2, 2))

    def test_out_of_bounds_rejected(self):
        img = np.zeros((6, 6))
        with pytest.raises(ps.ValidationError):
            ps.cnr(img, ps.Roi(4, 4, 4, 4), ps.Roi(0, 0, 2, 2))

    def test_affine_invariance(self, rng):
        img = rng.random((10, 14))
        roi1, roi2 = ps.Roi(1, 1, 4, 5), ps.Roi(8, 3, 4, 5)
        base = ps.cnr(img, roi1, roi2)
        assert ps.cnr(3.7 * img + 11.0, roi1, roi2) == pytest.approx(base, rel=1e-12)

    def test_area_minimum(self):
        with pytest.raises(ps.ValidationError):
            ps.Roi(0, 0, 1, 3)


class TestCnrProtocol:
    def test_single_placement_has_no_sem(self, rng):
        img = rng.random((16, 16))
        res = ps.cnr_protocol(img, ps.Roi(2, 2, 3, 3), ps.Roi(10, 10, 3, 3),
                              n_placements=1, rng=0)
        assert res.sem is None
        assert res.n_placements == 1

    def test_deterministic_seeding(self, rng):
        img = rng.random((20, 20))
        kw = dict(n_placements=8, jitter_px=2, rng=42)
        a = ps.cnr_protocol(img, ps.Roi(3, 3, 4, 4), ps.Roi(12, 12, 4, 4), **kw)
        b = ps.cnr_protocol(img, ps.Roi(3, 3, 4, 4), ps.Roi(12, 12, 4, 4), **kw)
        assert a == b

    def test_null_image_consistent_with_null_distribution(self):
        # Oracle: simulate the protocol's null distribution on homogeneous
        # noise, then check a fresh null image does not exceed its far tail.
        gen = np.random.default_rng(77)
        roi1, roi2 = ps.Roi(3, 3, 5, 5), ps.Roi(14, 8, 5, 5)
        null_means = []
        for _ in range(300):
            img = gen.normal(0.0, 1.0, (24, 24))
            null_means.append(
                ps.cnr_protocol(img, roi1, roi2, n_placements=10, rng=1).cnr
            )
        q999 = np.quantile(null_means, 0.999)
        probe = ps.cnr_protocol(
            np.random.default_rng(5).normal(0.0, 1.0, (24, 24)), roi1, roi2,
            n_placements=10, rng=2,
        )
        assert probe.cnr <= q999

    def test_mask_keeps_object_roi_on_object(self):
        mask = np.zeros((20, 20))
        mask[:, 8:14] = 1.0
        img = np.random.default_rng(0).normal(5.0, 1.0, (20, 20))
        res = ps.cnr_protocol(
            img, ps.Roi(9, 4, 4, 8, role="object"), ps.Roi(1, 4, 4, 8, role="background"),
            n_placements=6, jitter_px=2, rng=3, scene_mask=mask,
        )
        assert res.n_placements == 6

    def test_infeasible_placement_raises(self):
        mask = np.zeros((20, 20))  # nothing is on-object
        img = np.zeros((20, 20))
        with pytest.raises(ps.PlacementError):
            ps.cnr_protocol(
                img, ps.Roi(2, 2, 4, 4, role="object"), ps.Roi(10, 10, 4, 4),
                n_placements=2, rng=0, scene_mask=mask,
            )


def synthetic_esf(a=1.0, b=0.0, x0=10.0, w=2.0, n=64, span=30.0, noise=0.0, seed=0):
    x = np.linspace(0.0, span, n)
    y = a * erf((x - x0) / w) + b
    if noise:
        y = y + np.random.default_rng(seed).normal(0.0, noise, n)
    return x, y


class TestEsfFit:
    def test_noiseless_recovery(self):
        x, y = synthetic_esf()
        fit = ps.fit_esf(y, x=x)
        assert fit.converged
        assert fit.a == pytest.approx(1.0, rel=5e-3)
        assert fit.b == pytest.approx(0.0, abs=5e-3)
        assert fit.x0 == pytest.approx(10.0, rel=5e-3)
        assert fit.w == pytest.approx(2.0, rel=5e-3)

    def test_converges_from_perturbed_initialization(self):
        x, y = synthetic_esf()
        for scale in (0.75, 1.25):
            fit = ps.fit_esf(y, x=x, init=(1.0 * scale, 0.05, 10.0 * scale, 2.0 * scale))
            assert fit.converged
            assert fit.w == pytest.approx(2.0, rel=5e-3)

    def test_reversed_edge(self):
        x, y = synthetic_esf(a=-0.8, b=0.5)
        fit = ps.fit_esf(y, x=x)
        assert fit.converged
        assert fit.a == pytest.approx(-0.8, rel=1e-2)
        assert fit.w == pytest.approx(2.0, rel=1e-2)

    def test_pure_noise_rarely_converges(self):
        gen = np.random.default_rng(123)
        flags = []
        for _ in range(100):
            y = gen.normal(0.0, 1.0, 48)
            flags.append(ps.fit_esf(y).converged)
        assert np.mean(flags) <= 0.05

    def test_noise_snr10_width_error(self):
        # Median width error under SNR 10 noise stays below 5%.
        errors = []
        for seed in range(100):
            x, y = synthetic_esf(noise=0.1, seed=seed)
            fit = ps.fit_esf(y, x=x)
            if fit.converged:
                errors.append(abs(fit.w - 2.0) / 2.0)
        assert len(errors) >= 90
        assert np.median(errors) < 0.05

    def test_too_few_samples(self):
        with pytest.raises(ps.ValidationError):
            ps.fit_esf(np.zeros(5))


class TestResolution:
    def test_unit_radius(self):
        assert ps.fwhm_resolution(1.0) == pytest.approx(1.6651, abs=1e-4)
        assert RESOLUTION_PER_W == pytest.approx(2.0 * np.sqrt(np.log(2.0)), rel=1e-15)

    def test_published_width(self):
        w = 2.9 / RESOLUTION_PER_W
        assert ps.fwhm_resolution(w) == pytest.approx(2.9, rel=1e-12)

    def test_linear(self):
        assert ps.fwhm_resolution(4.0) == pytest.approx(2.0 * ps.fwhm_resolution(2.0))

    def test_nonpositive_rejected(self):
        with pytest.raises(ps.ValidationError):
            ps.fwhm_resolution(0.0)


class TestMomentumWidth:
    def test_recovers_configured_split(self):
        # The detector must be generous relative to the split width: finite
        # acceptance trims the sum-coordinate tails by ~sigma_d/width.
        plan = make_plan(
            shape=(128, 160), pitch=1.0, pair_rate=100, n_frames=1000, seed=19,
            split_sigma_um=(2.85, 2.45),
        )
        ledger = ps.simulate_ledger(plan)
        res = ps.momentum_corr_width(ledger, pixel_pitch_um=1.0)
        assert res.sigma_x_um == pytest.approx(2 * 2.85, rel=0.05)
        assert res.sigma_y_um == pytest.approx(2 * 2.45, rel=0.05)
        assert res.fwhm_x_um == pytest.approx(res.sigma_x_um * 2.3548, rel=1e-3)

    def test_zero_split_is_quantization_limited(self):
        plan = make_plan(
            shape=(16, 32), pitch=1.0, pair_rate=200, n_frames=200, seed=23,
            split_sigma_um=0.0,
        )
        ledger = ps.simulate_ledger(plan)
        res = ps.momentum_corr_width(ledger, pixel_pitch_um=1.0)
        assert res.sigma_x_um <= 1.0
        assert res.sigma_y_um <= 1.0

    def test_too_few_pairs(self):
        plan = make_plan(shape=(16, 32), pitch=1.0, pair_rate=1.0, n_frames=20, seed=2)
        ledger = ps.simulate_ledger(plan)
        with pytest.raises(ps.InsufficientDataError):
            ps.momentum_corr_width(ledger, pixel_pitch_um=1.0, min_pairs=500)

    def test_frames_path_matches_ledger(self):
        plan = make_plan(
            shape=(32, 48), pitch=1.0, pair_rate=300, n_frames=1500, seed=29,
            split_sigma_um=(2.0, 1.5),
        )
        stack, ledger = ps.simulate_stack(plan)
        from_ledger = ps.momentum_corr_width(ledger, pixel_pitch_um=1.0)
        from_frames = ps.momentum_corr_width(stack.frames, pixel_pitch_um=1.0, subsample=None)
        assert from_frames.sigma_x_um == pytest.approx(from_ledger.sigma_x_um, rel=0.15)
        assert from_frames.sigma_y_um == pytest.approx(from_ledger.sigma_y_um, rel=0.15)


class TestEdgeProfile:
    def test_axes(self):
        img = np.arange(12.0).reshape(3, 4)
        assert np.allclose(ps.edge_profile(img, "x"), img.mean(axis=0))
        assert np.allclose(ps.edge_profile(img, "y"), img.mean(axis=1))
        with pytest.raises(ps.ValidationError):
            ps.edge_profile(img, "diag")
