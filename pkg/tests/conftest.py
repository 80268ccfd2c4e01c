import numpy as np
import pytest

import pairscope as ps


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_plan(
    scene_kind="uniform",
    shape=(32, 32),
    pitch=2.0,
    pair_rate=512,
    n_frames=100,
    seed=7,
    stray_photons=0.0,
    split_sigma_um=None,
    center=None,
    record_pairs=False,
    scene_params=None,
    detector_params=None,
):
    scene_params = scene_params or {}
    detector_params = detector_params or {}
    scene = ps.make_test_scene(scene_kind, shape, pitch, **scene_params)
    optics = ps.OpticalParams(pixel_pitch_um=pitch)
    spdc = ps.SpdcParams(pair_rate=pair_rate, split_sigma_um=split_sigma_um, center=center)
    det = ps.DetectorModel(width=shape[1], height=shape[0], **detector_params)
    stray = ps.StrayLightModel(mean_photons=stray_photons) if stray_photons > 0 else None
    return ps.SimulationPlan(
        scene=scene, optics=optics, spdc=spdc, detector=det,
        stray=stray, n_frames=n_frames, seed=seed, record_pairs=record_pairs,
    )


@pytest.fixture
def small_plan():
    return make_plan()
