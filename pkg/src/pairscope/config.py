"""Run configuration: a sectioned key/value file mapped onto the model types.

The file format is INI-style (``configparser``). Every simulation parameter
with a measured default (camera offset and calibration slope, wavelength,
effective NA, region geometry) is spelled out in the shipped example
configuration so a run records its own provenance.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace

from .errors import ConfigError
from .metrics import Roi
from .optics import ObjectMask, OpticalParams, make_test_scene
from .simulate import DetectorModel, SimulationPlan, SpdcParams, StrayLightModel

_KNOWN_KEYS = {
    "run": {"n_frames", "seed", "output", "estimator", "workers", "record_pairs", "chunk_frames"},
    "scene": {
        "kind", "width_px", "height_px", "bar_width_um", "bar_count",
        "edge_x_um", "fiber_count", "fiber_width_um", "scene_seed", "path",
    },
    "optics": {
        "wavelength_um", "numerical_aperture", "magnification",
        "pixel_pitch_um", "psf_width_scale",
    },
    "spdc": {"pair_rate", "split_sigma_um", "center"},
    "detector": {
        "background_offset", "photons_per_count", "em_gain", "read_noise_sigma",
        "quantum_efficiency", "saturation", "bin_factor",
    },
    "stray": {"mean_photons", "relative_to_signal", "corr_length_px"},
    "analysis": {
        "roi_object", "roi_background", "placements", "jitter_px", "min_object_fraction",
    },
}

ESTIMATOR_CHOICES = ("covariance", "shifted", "both")


def _parse_pair(text, name):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if len(parts) != 2:
        raise ConfigError(f"{name} must be two comma-separated numbers, got {text!r}")
    try:
        return (float(parts[0]), float(parts[1]))
    except ValueError as exc:
        raise ConfigError(f"{name} must be numeric, got {text!r}") from exc


def _parse_roi(text, role, name):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if len(parts) != 4:
        raise ConfigError(f"{name} must be 'x,y,w,h', got {text!r}")
    try:
        x, y, w, h = (int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{name} must be integers, got {text!r}") from exc
    return Roi(x, y, w, h, role=role)


@dataclass
class RunConfig:
    """Validated run description, assembled from a config file or directly."""

    n_frames: int = 1000
    seed: int | None = None
    output: str = "out"
    estimator: str = "covariance"
    workers: int = 1
    record_pairs: bool = False
    chunk_frames: int = 512

    scene_kind: str = "bars"
    scene_shape: tuple[int, int] = (50, 100)  # (height, width)
    scene_params: dict = field(default_factory=dict)

    optics: OpticalParams = field(default_factory=OpticalParams)
    spdc: SpdcParams = field(default_factory=SpdcParams)
    detector_params: dict = field(default_factory=dict)

    stray_mean_photons: float = 0.0
    stray_relative: float | None = None
    stray_corr_length_px: float = 3.0

    roi_object: Roi | None = None
    roi_background: Roi | None = None
    placements: int = 10
    jitter_px: int = 2
    min_object_fraction: float = 0.9

    def __post_init__(self):
        if self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")
        if self.estimator not in ESTIMATOR_CHOICES:
            raise ConfigError(f"estimator must be one of {ESTIMATOR_CHOICES}, got {self.estimator!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.chunk_frames < 1:
            raise ConfigError("chunk_frames must be >= 1")

    # -- assembly -----------------------------------------------------------

    def build_scene(self) -> ObjectMask:
        return make_test_scene(
            self.scene_kind, self.scene_shape, self.optics.pixel_pitch_um, **self.scene_params
        )

    def build_detector(self) -> DetectorModel:
        h, w = self.scene_shape
        return DetectorModel(width=w, height=h, **self.detector_params)

    def expected_signal_photons(self, scene: ObjectMask | None = None) -> float:
        """Mean signal photons per pixel per frame over the field of view.

        Computed analytically from the pair rate and the scene transmission
        so relative stray levels are deterministic.
        """
        scene = scene or self.build_scene()
        n_px = scene.transmission.size
        return self.spdc.pair_rate * float((scene.transmission**2).mean()) / n_px

    def resolve_stray(self, scene: ObjectMask | None = None) -> StrayLightModel | None:
        mean = self.stray_mean_photons
        if self.stray_relative is not None:
            mean = self.stray_relative * self.expected_signal_photons(scene)
        if mean <= 0:
            return None
        return StrayLightModel(mean_photons=mean, corr_length_px=self.stray_corr_length_px)

    def plan(self, seed: int | None = None, n_frames: int | None = None,
             stray_relative: float | None = None) -> SimulationPlan:
        """Build a simulation plan, optionally overriding seed, length, stray."""
        use_seed = seed if seed is not None else self.seed
        if use_seed is None:
            raise ConfigError("a seed is required to simulate (set [run] seed or pass --seed)")
        cfg = self
        if stray_relative is not None:
            cfg = replace(self, stray_relative=stray_relative, stray_mean_photons=0.0)
        scene = cfg.build_scene()
        return SimulationPlan(
            scene=scene,
            optics=cfg.optics,
            spdc=cfg.spdc,
            detector=cfg.build_detector(),
            stray=cfg.resolve_stray(scene),
            n_frames=n_frames if n_frames is not None else cfg.n_frames,
            seed=int(use_seed),
            record_pairs=cfg.record_pairs,
        )


def load_config(path) -> RunConfig:
    """Parse and validate an INI run configuration."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    if not parser.sections():
        raise ConfigError(f"config file has no sections: {path}")

    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(parser[section]) - _KNOWN_KEYS[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")

    def get(section, key, default=None):
        if parser.has_option(section, key):
            value = parser.get(section, key).strip()
            return value if value else default
        return default

    try:
        scene_kind = get("scene", "kind", "bars")
        shape = (int(get("scene", "height_px", 50)), int(get("scene", "width_px", 100)))
        scene_params = {}
        if scene_kind == "bars":
            scene_params["bar_width_um"] = float(get("scene", "bar_width_um", 3.0))
            scene_params["count"] = int(get("scene", "bar_count", 3))
        elif scene_kind == "edge":
            edge_x = get("scene", "edge_x_um")
            if edge_x is not None:
                scene_params["edge_x_um"] = float(edge_x)
        elif scene_kind == "fibers":
            scene_params["width_um"] = float(get("scene", "fiber_width_um", 6.0))
            scene_params["count"] = int(get("scene", "fiber_count", 3))
            scene_params["seed"] = int(get("scene", "scene_seed", 0))
        elif scene_kind == "import":
            scene_params["path"] = get("scene", "path")
        elif scene_kind != "uniform":
            raise ConfigError(f"unknown scene kind {scene_kind!r}")

        optics = OpticalParams(
            wavelength_um=float(get("optics", "wavelength_um", OpticalParams.wavelength_um)),
            numerical_aperture=float(
                get("optics", "numerical_aperture", OpticalParams.numerical_aperture)
            ),
            magnification=float(get("optics", "magnification", OpticalParams.magnification)),
            pixel_pitch_um=float(get("optics", "pixel_pitch_um", OpticalParams.pixel_pitch_um)),
            psf_width_scale=float(get("optics", "psf_width_scale", OpticalParams.psf_width_scale)),
        )

        split_text = get("spdc", "split_sigma_um")
        split = None
        if split_text is not None:
            split = _parse_pair(split_text, "split_sigma_um") if "," in split_text else float(split_text)
        center_text = get("spdc", "center")
        center = _parse_pair(center_text, "center") if center_text is not None else None
        spdc = SpdcParams(
            pair_rate=float(get("spdc", "pair_rate", 1000.0)),
            split_sigma_um=split,
            center=center,
        )

        detector_params = {}
        for key, cast in (
            ("background_offset", float),
            ("photons_per_count", float),
            ("em_gain", float),
            ("read_noise_sigma", float),
            ("quantum_efficiency", float),
            ("saturation", int),
            ("bin_factor", int),
        ):
            value = get("detector", key)
            if value is not None:
                detector_params[key] = cast(value)

        stray_rel_text = get("stray", "relative_to_signal")
        roi_obj_text = get("analysis", "roi_object")
        roi_bg_text = get("analysis", "roi_background")

        cfg = RunConfig(
            n_frames=int(get("run", "n_frames", 1000)),
            seed=(int(get("run", "seed")) if get("run", "seed") is not None else None),
            output=get("run", "output", "out"),
            estimator=get("run", "estimator", "covariance"),
            workers=int(get("run", "workers", 1)),
            record_pairs=str(get("run", "record_pairs", "false")).lower() in ("1", "true", "yes"),
            chunk_frames=int(get("run", "chunk_frames", 512)),
            scene_kind=scene_kind,
            scene_shape=shape,
            scene_params=scene_params,
            optics=optics,
            spdc=spdc,
            detector_params=detector_params,
            stray_mean_photons=float(get("stray", "mean_photons", 0.0)),
            stray_relative=(float(stray_rel_text) if stray_rel_text is not None else None),
            stray_corr_length_px=float(get("stray", "corr_length_px", 3.0)),
            roi_object=(_parse_roi(roi_obj_text, "object", "roi_object") if roi_obj_text else None),
            roi_background=(
                _parse_roi(roi_bg_text, "background", "roi_background") if roi_bg_text else None
            ),
            placements=int(get("analysis", "placements", 10)),
            jitter_px=int(get("analysis", "jitter_px", 2)),
            min_object_fraction=float(get("analysis", "min_object_fraction", 0.9)),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc

    # Fail early on inconsistent component parameters.
    cfg.build_scene()
    cfg.build_detector()
    return cfg
