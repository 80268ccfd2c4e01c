"""Quantitative evaluation: normalization, CNR, resolution, pair widths.

The resolution chain follows the standard edge-target procedure: a line
profile across an edge is fitted to

    ESF(x) = a * erf((x - x0) / w) + b

whose derivative is a Gaussian line spread function; the resolution is its
full width at half maximum, R = 2 * sqrt(ln 2) * w.

The contrast-to-noise ratio between an object region and a background
region is |mean1 - mean2| / sqrt(var1 + var2) with sample (n-1) variances,
and is reported as a mean with a standard error over repeated, jittered
region placements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.special import erf

from ._validation import check_array, check_positive
from .errors import (
    DegenerateImageError,
    InsufficientDataError,
    PlacementError,
    UndefinedCnrError,
    ValidationError,
)
from .optics import GAUSSIAN_FWHM_PER_SIGMA

#: FWHM of the Gaussian LSF per unit ESF radius w, 2*sqrt(ln 2).
RESOLUTION_PER_W = 2.0 * np.sqrt(np.log(2.0))


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max normalization to [0, 1]. Constant images are rejected."""
    values = check_array(values, "image")
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        raise DegenerateImageError("image has no dynamic range (max == min)")
    return (values - lo) / (hi - lo)


@dataclass(frozen=True)
class Roi:
    """Axis-aligned rectangle in image pixels."""

    x: int
    y: int
    w: int
    h: int
    role: str = "object"  # object | background

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValidationError("ROI must have positive width and height")
        if self.w * self.h < 4:
            raise ValidationError("ROI area must be at least 4 pixels")

    def slices(self):
        return (slice(self.y, self.y + self.h), slice(self.x, self.x + self.w))

    def inside(self, shape) -> bool:
        return 0 <= self.x and 0 <= self.y and self.x + self.w <= shape[1] and self.y + self.h <= shape[0]

    def shifted(self, dx: int, dy: int) -> "Roi":
        return Roi(self.x + dx, self.y + dy, self.w, self.h, self.role)

    def overlaps(self, other: "Roi") -> bool:
        return not (
            self.x + self.w <= other.x
            or other.x + other.w <= self.x
            or self.y + self.h <= other.y
            or other.y + other.h <= self.y
        )


def cnr_samples(i1, i2) -> float:
    """CNR from two pixel-sample sets: |mean1 - mean2| / sqrt(var1 + var2).

    Variances are the sample (ddof=1) statistics. Raises when both sets are
    exactly constant.
    """
    i1 = np.asarray(i1, dtype=float).ravel()
    i2 = np.asarray(i2, dtype=float).ravel()
    var1 = i1.var(ddof=1) if i1.size > 1 else 0.0
    var2 = i2.var(ddof=1) if i2.size > 1 else 0.0
    if var1 == 0.0 and var2 == 0.0:
        raise UndefinedCnrError("both regions have zero variance; CNR undefined")
    return float(abs(i1.mean() - i2.mean()) / np.sqrt(var1 + var2))


def cnr(values: np.ndarray, roi_object: Roi, roi_background: Roi) -> float:
    """Contrast-to-noise ratio between two disjoint rectangular regions."""
    values = check_array(values, "image", ndim=2)
    for roi in (roi_object, roi_background):
        if not roi.inside(values.shape):
            raise ValidationError(f"ROI {roi} does not fit in image of shape {values.shape}")
    if roi_object.overlaps(roi_background):
        raise ValidationError("object and background ROIs must be disjoint")
    return cnr_samples(values[roi_object.slices()], values[roi_background.slices()])


@dataclass(frozen=True)
class CnrResult:
    """CNR protocol outcome over repeated placements."""

    cnr: float  # mean over placements
    sem: float | None  # standard error of the mean, None for n < 2
    n_placements: int
    values: tuple = ()


def _placement_ok(roi, shape, scene_mask, min_object_fraction):
    if not roi.inside(shape):
        return False
    if scene_mask is None:
        return True
    frac = float((scene_mask[roi.slices()] > 0.5).mean())
    if roi.role == "object":
        return frac >= min_object_fraction
    return frac <= 1.0 - min_object_fraction


def cnr_protocol(
    values: np.ndarray,
    roi_object: Roi,
    roi_background: Roi,
    n_placements: int = 10,
    jitter_px: int = 2,
    rng=None,
    scene_mask: np.ndarray | None = None,
    min_object_fraction: float = 0.9,
    max_tries: int = 200,
) -> CnrResult:
    """Repeat the CNR measurement over jittered region placements.

    Each placement shifts both template regions independently by uniform
    integer offsets within ``jitter_px``. When a scene mask is supplied the
    object region must keep at least ``min_object_fraction`` of its pixels
    on the object and the background region must stay off it. Results are
    reported as mean and standard error of the mean.
    """
    values = check_array(values, "image", ndim=2)
    if n_placements < 1:
        raise ValidationError("n_placements must be >= 1")
    rng = np.random.default_rng(rng)
    results = []
    for _ in range(n_placements):
        placed = None
        for _try in range(max_tries):
            offsets = rng.integers(-jitter_px, jitter_px + 1, size=4)
            cand_obj = roi_object.shifted(int(offsets[0]), int(offsets[1]))
            cand_bg = roi_background.shifted(int(offsets[2]), int(offsets[3]))
            if (
                _placement_ok(cand_obj, values.shape, scene_mask, min_object_fraction)
                and _placement_ok(cand_bg, values.shape, scene_mask, min_object_fraction)
                and not cand_obj.overlaps(cand_bg)
            ):
                placed = (cand_obj, cand_bg)
                break
        if placed is None:
            raise PlacementError(
                f"no valid placement found within {max_tries} tries (jitter {jitter_px} px)"
            )
        results.append(cnr(values, placed[0], placed[1]))
    arr = np.asarray(results)
    sem = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) >= 2 else None
    return CnrResult(cnr=float(arr.mean()), sem=sem, n_placements=len(arr), values=tuple(arr))


@dataclass(frozen=True)
class EsfFit:
    """Edge-spread-function fit a*erf((x - x0)/w) + b."""

    a: float
    b: float
    x0: float
    w: float
    residual_rms: float
    converged: bool

    @property
    def fwhm(self) -> float:
        """FWHM of the Gaussian LSF implied by the fitted radius."""
        return fwhm_resolution(abs(self.w))


def _esf_model(params, x):
    a, b, x0, w = params
    return a * erf((x - x0) / w) + b


def _esf_jacobian(params, x, _y):
    a, b, x0, w = params
    z = (x - x0) / w
    g = 2.0 / np.sqrt(np.pi) * np.exp(-(z**2))
    jac = np.empty((x.size, 4))
    jac[:, 0] = erf(z)
    jac[:, 1] = 1.0
    jac[:, 2] = -a * g / w
    jac[:, 3] = -a * g * z / w
    return jac


def _esf_initial_guess(x, y):
    lo, hi = float(y.min()), float(y.max())
    b0 = 0.5 * (lo + hi)
    a0 = 0.5 * (hi - lo)
    # Smooth gradient to place the edge; its sign orients the fit. Pad with
    # edge values so the boundaries do not fake a steep gradient.
    padded = np.concatenate([[y[0]], y, [y[-1]]])
    ys = np.convolve(padded, np.ones(3) / 3.0, mode="valid")
    grad = np.gradient(ys, x)
    i0 = int(np.argmax(np.abs(grad)))
    if grad[i0] < 0:
        a0 = -a0
    x0 = float(x[i0])
    # Quartile crossing distance of an erf edge is 0.954 w.
    span = float(x.max() - x.min())
    w0 = max(span / 20.0, 1e-3)
    low, high = b0 - 0.5 * abs(a0), b0 + 0.5 * abs(a0)
    xi_lo = x[np.argmin(np.abs(ys - low))]
    xi_hi = x[np.argmin(np.abs(ys - high))]
    if abs(xi_hi - xi_lo) > 0:
        w0 = max(abs(float(xi_hi - xi_lo)) / 0.954, 1e-3)
    return np.array([a0, b0, x0, w0])


def fit_esf(profile: np.ndarray, x: np.ndarray | None = None, init=None) -> EsfFit:
    """Fit an erf edge model to a 1-D line profile.

    Damped least squares with an analytic Jacobian; the starting point is
    derived from the min/max levels and the steepest-gradient location
    unless ``init`` overrides it. A fit on data without a credible edge
    (amplitude not clearly above the residual level, or an edge centre
    outside the profile) reports ``converged=False`` rather than raising.
    """
    y = check_array(profile, "profile", ndim=1).astype(float)
    if y.size < 8:
        raise ValidationError("ESF fit needs at least 8 samples spanning the edge")
    x = np.arange(y.size, dtype=float) if x is None else check_array(x, "x", ndim=1).astype(float)
    if x.size != y.size:
        raise ValidationError("x and profile must have the same length")

    p0 = np.asarray(init, dtype=float) if init is not None else _esf_initial_guess(x, y)
    res = least_squares(
        lambda p: _esf_model(p, x) - y,
        p0,
        jac=lambda p: _esf_jacobian(p, x, y),
        method="lm",
        max_nfev=2000,
    )
    a, b, x0, w = res.x
    if w < 0:  # erf((x-x0)/w) with w<0 equals the a -> -a reflection
        w, a = -w, -a
    residual_rms = float(np.sqrt(np.mean(res.fun**2)))
    span = float(x.max() - x.min())
    noise_floor = max(residual_rms, 1e-12 * max(abs(a), 1.0))
    converged = bool(
        res.success
        and np.isfinite([a, b, x0, w]).all()
        and 0.0 < w < 2.0 * span
        and x.min() - 0.25 * span <= x0 <= x.max() + 0.25 * span
        and abs(a) >= 3.0 * noise_floor
    )
    return EsfFit(
        a=float(a), b=float(b), x0=float(x0), w=float(w),
        residual_rms=residual_rms, converged=converged,
    )


def fwhm_resolution(w: float) -> float:
    """Resolution from the fitted edge radius: R = 2 * sqrt(ln 2) * w."""
    check_positive(w, "w")
    return RESOLUTION_PER_W * w


def edge_profile(values: np.ndarray, edge_axis: str = "x") -> np.ndarray:
    """Pool an image into a 1-D profile across a straight edge.

    ``edge_axis="x"`` averages rows of a vertical edge (profile runs along
    x); ``edge_axis="y"`` averages columns.
    """
    values = check_array(values, "image", ndim=2)
    if edge_axis == "x":
        return values.mean(axis=0)
    if edge_axis == "y":
        return values.mean(axis=1)
    raise ValidationError("edge_axis must be 'x' or 'y'")


@dataclass(frozen=True)
class MomentumWidthResult:
    """Per-axis spread of the pair sum coordinate, in micrometres.

    ``sigma`` is the fitted Gaussian standard deviation of the
    sum-coordinate distribution (twice the split sigma of the source model);
    ``fwhm`` is its FWHM equivalent. Both conventions are reported because
    published widths do not always state which one they use.
    """

    sigma_x_um: float
    sigma_y_um: float
    fwhm_x_um: float
    fwhm_y_um: float
    n_pairs: int | None  # None when measured from frames rather than a ledger


def _fit_gaussian_profile(centers, counts):
    """Fit amp*exp(-(x-mu)^2/(2 sigma^2)) + base; returns (mu, sigma).

    The moment-based starting point is taken from the connected region
    around the peak so that far-field noise cannot poison the width guess.
    """
    counts = counts.astype(float)
    base0 = float(np.median(counts))
    amp0 = float(counts.max() - base0)
    if amp0 <= 0:
        raise InsufficientDataError("sum-coordinate histogram has no peak")
    i_pk = int(np.argmax(counts))
    above = counts > base0 + 0.1 * amp0
    lo = i_pk
    while lo > 0 and above[lo - 1]:
        lo -= 1
    hi = i_pk
    while hi < counts.size - 1 and above[hi + 1]:
        hi += 1
    sel = slice(lo, hi + 1)
    weights = np.maximum(counts[sel] - base0, 0.0)
    if weights.sum() <= 0:
        raise InsufficientDataError("sum-coordinate histogram has no mass above baseline")
    mu0 = float(np.sum(weights * centers[sel]) / weights.sum())
    var0 = float(np.sum(weights * (centers[sel] - mu0) ** 2) / weights.sum())
    sigma0 = max(np.sqrt(var0), 0.25)

    # Fit inside a window around the peak; far tails carry no information
    # about the width and only add noise.
    window = np.abs(centers - mu0) <= max(8.0 * sigma0, 4.0)
    x = centers[window]
    y = counts[window]

    def resid(p):
        amp, mu, sigma, base = p
        return amp * np.exp(-((x - mu) ** 2) / (2.0 * sigma**2)) + base - y

    res = least_squares(resid, [amp0, mu0, sigma0, base0], method="lm", max_nfev=2000)
    amp, mu, sigma, _ = res.x
    if not res.success or not np.isfinite(sigma) or amp <= 0:
        raise InsufficientDataError("Gaussian fit of the sum-coordinate profile failed")
    return float(mu), float(abs(sigma))


def momentum_corr_width(
    source,
    pixel_pitch_um: float,
    min_pairs: int = 200,
    subsample: int | None = 4000,
) -> MomentumWidthResult:
    """Measure the momentum-correlation width from pairs or frames.

    ``source`` is either a pair ledger (its sum-coordinate histograms are
    used directly) or a frame stack / array, in which case the summed
    cross-covariance landscape provides the coincidence-weighted
    sum-coordinate distribution. Each axis is fitted with a Gaussian and the
    width is converted to micrometres through the pixel pitch.
    """
    check_positive(pixel_pitch_um, "pixel_pitch_um")
    from .simulate import PairLedger

    if isinstance(source, PairLedger):
        offx, offy = source.sum_hist_offset
        hx = source.sum_hist_x
        hy = source.sum_hist_y
        n_pairs = int(hx.sum())
        if n_pairs < min_pairs:
            raise InsufficientDataError(
                f"only {n_pairs} pairs available, need at least {min_pairs}"
            )
        cx = np.arange(hx.size, dtype=float) - offx
        cy = np.arange(hy.size, dtype=float) - offy
        _, sx = _fit_gaussian_profile(cx, hx)
        _, sy = _fit_gaussian_profile(cy, hy)
    else:
        from .estimation import sum_coordinate_landscape

        landscape, (off_x, off_y) = sum_coordinate_landscape(source, subsample=subsample)
        n_pairs = None
        peak = np.unravel_index(int(np.argmax(landscape)), landscape.shape)
        profile_x = landscape[peak[0], :]
        profile_y = landscape[:, peak[1]]
        cx = np.arange(profile_x.size, dtype=float) + off_x
        cy = np.arange(profile_y.size, dtype=float) + off_y
        _, sx = _fit_gaussian_profile(cx, profile_x)
        _, sy = _fit_gaussian_profile(cy, profile_y)

    return MomentumWidthResult(
        sigma_x_um=sx * pixel_pitch_um,
        sigma_y_um=sy * pixel_pitch_um,
        fwhm_x_um=sx * pixel_pitch_um * GAUSSIAN_FWHM_PER_SIGMA,
        fwhm_y_um=sy * pixel_pitch_um * GAUSSIAN_FWHM_PER_SIGMA,
        n_pairs=n_pairs,
    )
