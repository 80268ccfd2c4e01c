"""Experiment sweeps: CNR versus frame count and versus stray light.

Both sweeps reuse a single streamed simulation per seed where possible (the
frame sweep snapshots one growing accumulation rather than re-simulating
each length) and report rows ready for the fixed-header metrics CSV.
"""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .errors import ConfigError
from .metrics import cnr_protocol
from .pipeline import run_pipeline


def _estimator_list(name: str):
    if name == "both":
        return ["covariance", "shifted"]
    return [name]


def _protocol_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]))


def _require_rois(cfg: RunConfig):
    if cfg.roi_object is None or cfg.roi_background is None:
        raise ConfigError(
            "sweeps need [analysis] roi_object and roi_background in the config"
        )


def _image_for(result, estimator):
    if estimator == "covariance":
        return result.covariance_image()
    if estimator == "shifted":
        return result.shifted_image()
    if estimator == "classical":
        return result.classical_image()
    raise ConfigError(f"unknown estimator {estimator!r}")


def _cnr_row(cfg, scene_mask, image, estimator, rng, params):
    res = cnr_protocol(
        image.values,
        cfg.roi_object,
        cfg.roi_background,
        n_placements=cfg.placements,
        jitter_px=cfg.jitter_px,
        rng=rng,
        scene_mask=scene_mask,
        min_object_fraction=cfg.min_object_fraction,
    )
    return {
        "metric": "cnr",
        "value": res.cnr,
        "sem": res.sem,
        "n": res.n_placements,
        "params": {"estimator": estimator, **params},
    }


def sweep_frames(cfg: RunConfig, frame_counts, seeds=None, workers: int = 1):
    """CNR at several frame counts, one streamed run per seed.

    Returns CSV-ready rows with params estimator/frames/seed. Frame counts
    are snapshot points of a single accumulation, mirroring how a growing
    acquisition would be analysed.
    """
    _require_rois(cfg)
    frame_counts = sorted({int(n) for n in frame_counts})
    if not frame_counts or frame_counts[0] < 2:
        raise ConfigError("frame counts must all be >= 2")
    seeds = [cfg.seed] if seeds is None else list(seeds)
    estimators = _estimator_list(cfg.estimator)
    scene_mask = cfg.build_scene().transmission
    rows = []
    for seed in seeds:
        plan = cfg.plan(seed=seed, n_frames=frame_counts[-1])

        def snap(n_done, result, seed=seed):
            for est in estimators:
                image = _image_for(result, est)
                rng = _protocol_rng(plan.seed, n_done, estimators.index(est))
                rows.append(
                    _cnr_row(
                        cfg, scene_mask, image, est, rng,
                        {"sweep": "frames", "frames": n_done, "seed": plan.seed},
                    )
                )

        run_pipeline(
            plan,
            estimators=estimators,
            workers=workers,
            chunk_frames=cfg.chunk_frames,
            snapshot_frames=frame_counts,
            on_snapshot=snap,
        )
    return rows


def sweep_stray(cfg: RunConfig, multipliers, seeds=None, n_frames=None, workers: int = 1):
    """CNR of each estimator and of the classical image under stray light.

    ``multipliers`` scale the analytic mean signal level; a multiplier of 0
    disables stray light. Each level is simulated independently with the
    same seed so only the stray field changes.
    """
    _require_rois(cfg)
    seeds = [cfg.seed] if seeds is None else list(seeds)
    estimators = _estimator_list(cfg.estimator)
    scene_mask = cfg.build_scene().transmission
    rows = []
    for seed in seeds:
        for level in multipliers:
            level = float(level)
            plan = cfg.plan(seed=seed, n_frames=n_frames, stray_relative=level)
            result = run_pipeline(
                plan,
                estimators=[*estimators, "classical"],
                workers=workers,
                chunk_frames=cfg.chunk_frames,
            )
            for est in [*estimators, "classical"]:
                image = _image_for(result, est)
                rng = _protocol_rng(plan.seed, int(level * 1000), 97 + len(est))
                rows.append(
                    _cnr_row(
                        cfg, scene_mask, image, est, rng,
                        {"sweep": "stray", "stray": level, "seed": plan.seed},
                    )
                )
    return rows
