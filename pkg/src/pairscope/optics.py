"""Image-formation models for the two-arm coincidence microscope.

The imaging chain is approximated as shift invariant over the small field of
view, with Gaussian intensity point spread functions. Two kernels matter:

* ``classical``: the single-photon PSF at the source wavelength. The direct
  image of one arm is blurred by it.
* ``biphoton``: the PSF seen by a photon pair detected in coincidence. With
  balanced arms the pair behaves like one photon at half the wavelength, so
  this kernel has exactly half the classical FWHM by construction.

The renders in this module are closed-form expected images. They serve as
oracles for the Monte Carlo pipeline: a simulated stack, once reconstructed,
should converge to them.

All lengths are object-plane micrometres. Detector coordinates are the same
grid; the magnification ratio is carried only as bookkeeping metadata.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from ._validation import (
    check_array,
    check_in_unit_interval,
    check_positive,
    check_same_shape,
)
from .errors import TruncationError, ValidationError
from .images import ClassicalImage, CoincidenceImage

# FWHM of a Gaussian with unit standard deviation, 2*sqrt(2*ln 2).
GAUSSIAN_FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))

#: Prefactor of the diffraction-limited FWHM estimate 0.51 * lambda / NA.
FWHM_PREFACTOR = 0.51

PSF_KINDS = ("classical", "biphoton")

# Defaults reproduce a 532 nm source through an effective NA back-solved
# from a 2.9 um single-arm resolution; the nominal objective NA is higher
# but under-filled in practice. Magnification follows the relay chain
# (180/9) * (200/300).
DEFAULT_WAVELENGTH_UM = 0.532
DEFAULT_EFFECTIVE_NA = 0.0936
DEFAULT_MAGNIFICATION = (180.0 / 9.0) * (200.0 / 300.0)


@dataclass(frozen=True)
class OpticalParams:
    """Scalar optical parameters of one imaging arm.

    Parameters
    ----------
    wavelength_um : float
        Down-converted photon wavelength in micrometres.
    numerical_aperture : float
        Effective NA in (0, 1). This is a calibration knob, not a nominal
        objective rating.
    magnification : float
        Object-to-detector magnification. Bookkeeping only; the simulation
        grid is object-plane referred.
    pixel_pitch_um : float
        Object-plane-referred size of one (binned) detector pixel.
    psf_width_scale : float
        Optional multiplier applied to both PSF widths, standing in for
        defocus broadening.
    """

    wavelength_um: float = DEFAULT_WAVELENGTH_UM
    numerical_aperture: float = DEFAULT_EFFECTIVE_NA
    magnification: float = DEFAULT_MAGNIFICATION
    pixel_pitch_um: float = 1.0
    psf_width_scale: float = 1.0

    def __post_init__(self):
        check_positive(self.wavelength_um, "wavelength_um")
        if not 0.0 < self.numerical_aperture < 1.0:
            raise ValidationError(
                f"numerical_aperture must lie in (0, 1), got {self.numerical_aperture!r}"
            )
        check_positive(self.magnification, "magnification")
        check_positive(self.pixel_pitch_um, "pixel_pitch_um")
        check_positive(self.psf_width_scale, "psf_width_scale")


@dataclass(frozen=True)
class PsfKernel:
    """Discrete, unit-sum intensity PSF.

    ``grid`` entries are non-negative and sum to 1 within 1e-9, so
    convolution conserves energy. ``fwhm_um`` is the width of the underlying
    continuous Gaussian, not a moment of the sampled grid.
    """

    fwhm_um: float
    pixel_pitch_um: float
    grid: np.ndarray
    kind: str = "classical"

    def __post_init__(self):
        check_positive(self.fwhm_um, "fwhm_um")
        check_positive(self.pixel_pitch_um, "pixel_pitch_um")
        grid = check_array(self.grid, "grid", ndim=2, nonnegative=True)
        if abs(float(grid.sum()) - 1.0) > 1e-9:
            raise ValidationError("PSF grid must sum to 1 within 1e-9")
        if self.kind not in PSF_KINDS:
            raise ValidationError(f"kind must be one of {PSF_KINDS}, got {self.kind!r}")

    @property
    def sigma_um(self) -> float:
        return self.fwhm_um / GAUSSIAN_FWHM_PER_SIGMA

    @property
    def sigma_px(self) -> float:
        return self.sigma_um / self.pixel_pitch_um


@dataclass(frozen=True)
class ObjectMask:
    """Amplitude transmission map of the sample, values in [0, 1].

    The object acts on intensity with probability ``transmission**2``;
    phase is out of scope (amplitude objects only).
    """

    transmission: np.ndarray
    pixel_pitch_um: float

    def __post_init__(self):
        t = check_array(self.transmission, "transmission", ndim=2)
        if t.size and (t.min() < 0.0 or t.max() > 1.0):
            raise ValidationError("transmission values must lie in [0, 1]")
        check_positive(self.pixel_pitch_um, "pixel_pitch_um")

    @property
    def shape(self):
        return self.transmission.shape

    @property
    def extent_um(self):
        """Physical size as (width_um, height_um)."""
        h, w = self.transmission.shape
        return (w * self.pixel_pitch_um, h * self.pixel_pitch_um)


@dataclass(frozen=True)
class SourceProfile:
    """Squared field amplitude of the pair source on its Fourier plane."""

    intensity: np.ndarray

    def __post_init__(self):
        check_array(self.intensity, "intensity", ndim=2, nonnegative=True)


@dataclass(frozen=True)
class IlluminationField:
    """Illumination seen by the object in the two imaging modes.

    ``classical`` is the wide-field intensity at the full wavelength.
    ``biphoton`` is the squared-intensity illumination of the pair image at
    half the wavelength; squaring the source intensity before blurring is
    what distinguishes it.
    """

    classical: np.ndarray
    biphoton: np.ndarray

    def __post_init__(self):
        check_array(self.classical, "classical", ndim=2, nonnegative=True)
        check_array(self.biphoton, "biphoton", ndim=2, nonnegative=True)
        check_same_shape(self.classical, self.biphoton, "classical", "biphoton")

    @classmethod
    def uniform(cls, shape):
        ones = np.ones(shape, dtype=float)
        return cls(classical=ones, biphoton=ones.copy())


def psf_fwhm(params: OpticalParams, kind: str) -> float:
    """Object-plane FWHM in micrometres for one PSF kind.

    Uses FWHM = 0.51 * lambda_eff / NA with lambda_eff equal to the photon
    wavelength for the classical kernel and half of it for the biphoton
    kernel, so the biphoton value is exactly half the classical one.
    """
    if kind not in PSF_KINDS:
        raise ValidationError(f"kind must be one of {PSF_KINDS}, got {kind!r}")
    classical = (
        FWHM_PREFACTOR
        * params.wavelength_um
        / params.numerical_aperture
        * params.psf_width_scale
    )
    if kind == "classical":
        return classical
    return classical / 2.0


def make_gaussian_psf(
    fwhm_um: float,
    pixel_pitch_um: float,
    support_radius_px: int | None = None,
    kind: str = "classical",
) -> PsfKernel:
    """Sample a unit-sum Gaussian intensity PSF on the pixel grid.

    Parameters
    ----------
    fwhm_um : float
        Full width at half maximum of the continuous Gaussian.
    pixel_pitch_um : float
        Grid spacing.
    support_radius_px : int, optional
        Half width of the square support. Defaults to ceil(4 sigma) so the
        kernel carries essentially all the mass. Must be at least 3 sigma,
        otherwise the truncated kernel would lose more than ~0.1% of its
        mass per axis and is rejected.
    """
    check_positive(fwhm_um, "fwhm_um")
    check_positive(pixel_pitch_um, "pixel_pitch_um")
    sigma_px = fwhm_um / GAUSSIAN_FWHM_PER_SIGMA / pixel_pitch_um
    if support_radius_px is None:
        support_radius_px = max(1, int(np.ceil(4.0 * sigma_px)))
    support_radius_px = int(support_radius_px)
    if support_radius_px < 1:
        raise ValidationError("support_radius_px must be >= 1")
    if support_radius_px < 3.0 * sigma_px:
        raise TruncationError(
            f"support radius {support_radius_px} px is below 3 sigma "
            f"({3.0 * sigma_px:.2f} px); the kernel would truncate"
        )
    ax = np.arange(-support_radius_px, support_radius_px + 1, dtype=float)
    profile = np.exp(-(ax**2) / (2.0 * sigma_px**2))
    grid = np.outer(profile, profile)
    grid /= grid.sum()
    return PsfKernel(fwhm_um=fwhm_um, pixel_pitch_um=pixel_pitch_um, grid=grid, kind=kind)


def _convolve_same(field: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """FFT convolution with 'same' output, clipped against FFT round-off."""
    out = fftconvolve(field, kernel, mode="same")
    return np.maximum(out, 0.0)


def illumination_fields(
    source: SourceProfile, psf_classical: PsfKernel, psf_biphoton: PsfKernel
) -> IlluminationField:
    """Propagate the source plane to the object plane for both modes.

    The classical illumination is the source intensity blurred by the full
    wavelength kernel. The biphoton illumination blurs the *squared* source
    intensity with the half wavelength kernel, since a detected pair samples
    the source field twice.
    """
    intensity = source.intensity
    classical = _convolve_same(intensity, psf_classical.grid)
    biphoton = _convolve_same(intensity**2, psf_biphoton.grid)
    return IlluminationField(classical=classical, biphoton=biphoton)


def render_classical(
    mask: ObjectMask, illum: IlluminationField, psf_classical: PsfKernel
) -> ClassicalImage:
    """Expected single-arm image: (|t|^2 * illumination) blurred at lambda."""
    check_same_shape(mask.transmission, illum.classical, "mask", "illumination")
    field = (mask.transmission**2) * illum.classical
    values = _convolve_same(field, psf_classical.grid)
    return ClassicalImage(values=values, domain="model", meta={"fwhm_um": psf_classical.fwhm_um})


def render_coincidence(
    mask: ObjectMask, illum: IlluminationField, psf_biphoton: PsfKernel
) -> CoincidenceImage:
    """Expected coincidence image: (|t|^2 * pair illumination) blurred at lambda/2.

    Shares the convolution core with :func:`render_classical`; only the
    illumination component and the kernel differ.
    """
    check_same_shape(mask.transmission, illum.biphoton, "mask", "illumination")
    field = (mask.transmission**2) * illum.biphoton
    values = _convolve_same(field, psf_biphoton.grid)
    return CoincidenceImage(
        values=values, estimator="model", domain="model", meta={"fwhm_um": psf_biphoton.fwhm_um}
    )


def make_test_scene(kind: str, shape, pixel_pitch_um: float, **params) -> ObjectMask:
    """Build a binary test object on a (height, width) pixel grid.

    Kinds
    -----
    uniform
        ``t = 1`` everywhere.
    edge
        Vertical step: ``t = 0`` left of ``edge_x_um``, ``t = 1`` from it on.
    bars
        ``count`` vertical stripes of width ``bar_width_um`` on a pitch of
        twice the width (equal bar and gap), centred in the field.
    fibers
        ``count`` straight strips of width ``width_um`` with random position
        and orientation, drawn from ``seed``.
    import
        Load a grayscale PGM (P5) file from ``path``; sample values scale to
        [0, 1] amplitude.
    """
    height, width = int(shape[0]), int(shape[1])
    if height < 1 or width < 1:
        raise ValidationError("scene shape must be at least 1x1")
    check_positive(pixel_pitch_um, "pixel_pitch_um")
    # Pixel centres in object-plane micrometres; pixel i covers [i*p, (i+1)*p).
    xc = (np.arange(width) + 0.5) * pixel_pitch_um
    yc = (np.arange(height) + 0.5) * pixel_pitch_um

    if kind == "uniform":
        t = np.ones((height, width), dtype=float)

    elif kind == "edge":
        edge_x_um = float(params.get("edge_x_um", width * pixel_pitch_um / 2.0))
        t = np.where(xc >= edge_x_um, 1.0, 0.0)[np.newaxis, :].repeat(height, axis=0)

    elif kind == "bars":
        bar_width_um = check_positive(params.get("bar_width_um", 3.0), "bar_width_um")
        count = int(params.get("count", 3))
        if count < 1:
            raise ValidationError("bars count must be >= 1")
        pattern_um = (2 * count - 1) * bar_width_um
        start = (width * pixel_pitch_um - pattern_um) / 2.0
        t = np.zeros((height, width), dtype=float)
        for k in range(count):
            lo = start + 2 * k * bar_width_um
            on = (xc >= lo) & (xc < lo + bar_width_um)
            t[:, on] = 1.0

    elif kind == "fibers":
        width_um = check_positive(params.get("width_um", 6.0), "width_um")
        count = int(params.get("count", 3))
        if count < 1:
            raise ValidationError("fibers count must be >= 1")
        rng = np.random.default_rng(params.get("seed", 0))
        xx, yy = np.meshgrid(xc, yc)
        t = np.zeros((height, width), dtype=float)
        w_um = width * pixel_pitch_um
        h_um = height * pixel_pitch_um
        for _ in range(count):
            theta = rng.uniform(0.0, np.pi)
            px = rng.uniform(0.15 * w_um, 0.85 * w_um)
            py = rng.uniform(0.15 * h_um, 0.85 * h_um)
            # Signed distance from the line through (px, py) at angle theta.
            dist = np.abs(-(xx - px) * np.sin(theta) + (yy - py) * np.cos(theta))
            t[dist <= width_um / 2.0] = 1.0

    elif kind == "import":
        from .formats import read_pgm

        path = params.get("path")
        if path is None:
            raise ValidationError("scene kind 'import' requires a 'path' parameter")
        values, maxval = read_pgm(path)
        t = values.astype(float) / float(maxval)
        if t.shape != (height, width):
            raise ValidationError(
                f"imported scene shape {t.shape} does not match requested {(height, width)}"
            )

    else:
        raise ValidationError(f"unknown scene kind {kind!r}")

    return ObjectMask(transmission=t, pixel_pitch_um=pixel_pitch_um)
