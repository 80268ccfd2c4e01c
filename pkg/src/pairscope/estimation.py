"""Coincidence reconstruction from detector frame stacks.

The estimator of record is the per-pixel covariance between the left region
and the inversely registered right region::

    cov(L, R) = (1/N) * sum_i (L_i - mean(L)) (R_i - mean(R))

Detector noise and stray light are uncorrelated between the two regions, so
their contribution to the covariance vanishes in expectation; what survives
is the variance of the shared coincidence intensity, which for Poisson pair
arrivals equals its mean. The covariance image therefore estimates the mean
coincidence intensity directly.

The covariance is maintained through raw sums (n, sum_L, sum_R, sum_LR) per
registered pixel, making accumulation one-pass and mergeable: any partition
of the frames across workers, merged afterwards, reproduces the serial
result up to floating-point reassociation.

A frame-shifted accidental-subtraction baseline (``mean(L_i R_i) -
mean(L_i R_{i+1})``) is provided for comparison; it estimates the same
quantity for stationary stacks at roughly twice the variance. Under a slow
common drift the roles differ: the lag-one subtraction tracks the drift and
cancels it, while the covariance inherits the drift variance as bias.

Estimator classes follow the scikit-learn protocol (``fit`` /
``partial_fit``, fitted attributes with trailing underscores, ``get_params``)
so reconstructions compose with standard tooling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import next_fast_len, irfft2, rfft2
from sklearn.base import BaseEstimator

from ._validation import check_frames, check_positive
from .errors import InsufficientDataError, NoSignalError, ValidationError
from .images import ClassicalImage, CoincidenceImage
from .simulate import FrameStack


def _as_frames(X) -> np.ndarray:
    if isinstance(X, FrameStack):
        return X.frames
    return check_frames(X)


@dataclass(frozen=True)
class Registration:
    """Pixel-level mirror map between the left and right regions.

    ``center`` is the continuous symmetric point in full-frame pixel
    coordinates. Registration itself happens at integer granularity: left
    pixel ``(x, y)`` pairs with right pixel ``(kx - x, ky - y)`` where
    ``kx = round(2*cx) - 1`` (and likewise ``ky``); sub-pixel interpolation
    is deliberately avoided because it would correlate neighbouring-pixel
    noise.
    """

    center: tuple[float, float]
    frame_shape: tuple[int, int]  # (height, 2*width)
    confidence: float | None = field(default=None, compare=False)

    def __post_init__(self):
        h, w2 = self.frame_shape
        if h < 1 or w2 < 2 or w2 % 2:
            raise ValidationError(f"frame_shape must be (height, 2*width), got {self.frame_shape}")

    @property
    def region_width(self) -> int:
        return self.frame_shape[1] // 2

    @property
    def mirror_ints(self) -> tuple[int, int]:
        cx, cy = self.center
        return (int(np.rint(2.0 * cx)) - 1, int(np.rint(2.0 * cy)) - 1)

    def mirror(self, p):
        """Mirror full-frame pixel coordinates; an involution by construction."""
        kx, ky = self.mirror_ints
        p = np.asarray(p)
        return np.stack([kx - p[..., 0], ky - p[..., 1]], axis=-1)

    def _index_maps(self):
        h, w2 = self.frame_shape
        w = self.region_width
        kx, ky = self.mirror_ints
        x = np.arange(w)
        y = np.arange(h)
        mx = kx - x
        my = ky - y
        valid = (
            ((mx >= w) & (mx < 2 * w))[np.newaxis, :]
            & ((my >= 0) & (my < h))[:, np.newaxis]
        )
        return np.clip(mx, 0, w2 - 1), np.clip(my, 0, h - 1), valid

    def split(self, frames: np.ndarray):
        """Return (L, R_aligned, valid) with R gathered onto the left grid.

        ``frames`` may be (H, 2W) or (n, H, 2W). Entries of R_aligned where
        the mirror falls outside the right region are meaningless; ``valid``
        marks the usable pixels.
        """
        mx, my, valid = self._index_maps()
        w = self.region_width
        single = frames.ndim == 2
        if single:
            frames = frames[np.newaxis]
        L = frames[:, :, :w].astype(np.float64)
        R = frames[:, my[:, np.newaxis], mx[np.newaxis, :]].astype(np.float64)
        if single:
            return L[0], R[0], valid
        return L, R, valid


@dataclass
class CovarianceAccumulator:
    """Mergeable per-pixel sufficient statistics over frames.

    With ``shifted=True`` the lag-one product sums needed by the
    accidental-subtraction baseline are tracked as well; merging then
    stitches the chunk boundary with the stored edge frames.
    """

    registration: Registration
    shifted: bool = False
    n: int = 0
    sum_l: np.ndarray = None
    sum_r: np.ndarray = None
    sum_lr: np.ndarray = None
    sum_lr_lag: np.ndarray = None  # sum over i of L_i * R_{i+1}
    first_r: np.ndarray = None
    last_l: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        h = self.registration.frame_shape[0]
        w = self.registration.region_width
        shape = (h, w)
        for name in ("sum_l", "sum_r", "sum_lr"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(shape, dtype=np.float64))
        if self.shifted and self.sum_lr_lag is None:
            self.sum_lr_lag = np.zeros(shape, dtype=np.float64)


def accumulate(acc: CovarianceAccumulator, frames) -> CovarianceAccumulator:
    """Fold one frame (H, 2W) or a batch (n, H, 2W) into the accumulator."""
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[np.newaxis]
    if frames.shape[1:] != acc.registration.frame_shape:
        raise ValidationError(
            f"frame shape {frames.shape[1:]} does not match registration "
            f"{acc.registration.frame_shape}"
        )
    L, R, _ = acc.registration.split(frames)
    acc.sum_l += L.sum(axis=0)
    acc.sum_r += R.sum(axis=0)
    acc.sum_lr += np.einsum("bij,bij->ij", L, R)
    if acc.shifted:
        if acc.n > 0:
            acc.sum_lr_lag += acc.last_l * R[0]
        if L.shape[0] > 1:
            acc.sum_lr_lag += np.einsum("bij,bij->ij", L[:-1], R[1:])
        if acc.n == 0:
            acc.first_r = R[0].copy()
        acc.last_l = L[-1].copy()
    acc.n += L.shape[0]
    return acc


def merge(a: CovarianceAccumulator, b: CovarianceAccumulator) -> CovarianceAccumulator:
    """Combine two accumulators over disjoint, consecutive frame ranges.

    Associative and commutative on the plain sums; the shifted lag sums
    assume ``a`` precedes ``b`` in frame order.
    """
    if a.registration != b.registration:
        raise ValidationError("cannot merge accumulators with different registrations")
    if a.shifted != b.shifted:
        raise ValidationError("cannot merge shifted with non-shifted accumulators")
    if a.n == 0:
        return b
    if b.n == 0:
        return a
    out = CovarianceAccumulator(registration=a.registration, shifted=a.shifted)
    out.n = a.n + b.n
    out.sum_l = a.sum_l + b.sum_l
    out.sum_r = a.sum_r + b.sum_r
    out.sum_lr = a.sum_lr + b.sum_lr
    if a.shifted:
        out.sum_lr_lag = a.sum_lr_lag + b.sum_lr_lag + a.last_l * b.first_r
        out.first_r = a.first_r
        out.last_l = b.last_l
    return out


def _to_photon_domain(values, photons_per_count):
    if photons_per_count is None:
        return values, "counts2"
    check_positive(photons_per_count, "photons_per_count")
    return values * photons_per_count**2, "photons2"


def finalize_covariance(
    acc: CovarianceAccumulator, photons_per_count: float | None = None
) -> CoincidenceImage:
    """Population covariance image (1/N convention) from the raw sums.

    Negative values are statistical fluctuations and are preserved. Pixels
    whose mirror leaves the detector are zeroed and reported in the
    metadata.
    """
    if acc.n < 2:
        raise InsufficientDataError("need at least 2 frames to estimate a covariance")
    n = float(acc.n)
    values = acc.sum_lr / n - (acc.sum_l / n) * (acc.sum_r / n)
    _, _, valid = acc.registration._index_maps()
    values = np.where(valid, values, 0.0)
    values, domain = _to_photon_domain(values, photons_per_count)
    return CoincidenceImage(
        values=values,
        n_frames=acc.n,
        estimator="covariance",
        domain=domain,
        meta={"center": acc.registration.center, "valid_fraction": float(valid.mean())},
    )


def finalize_shifted_product(
    acc: CovarianceAccumulator, photons_per_count: float | None = None
) -> CoincidenceImage:
    """Accidental-subtraction baseline: mean(L_i R_i) - mean(L_i R_{i+1})."""
    if not acc.shifted:
        raise ValidationError("accumulator was not built with shifted=True")
    if acc.n < 2:
        raise InsufficientDataError("need at least 2 frames for the shifted-product baseline")
    values = acc.sum_lr / acc.n - acc.sum_lr_lag / (acc.n - 1)
    _, _, valid = acc.registration._index_maps()
    values = np.where(valid, values, 0.0)
    values, domain = _to_photon_domain(values, photons_per_count)
    return CoincidenceImage(
        values=values,
        n_frames=acc.n,
        estimator="shifted_product",
        domain=domain,
        meta={"center": acc.registration.center, "valid_fraction": float(valid.mean())},
    )


def sum_coordinate_landscape(frames, subsample: int | None = None):
    """Summed L/R cross-covariance for every integer sum coordinate.

    Returns ``(landscape, origin)`` where ``landscape[dy, dx]`` holds
    ``sum_p cov(L(p), R(p' ))`` over pixel pairs with
    ``p + p' - origin == (dx, dy)`` in full-frame coordinates. Registered
    pairs pile up at the sum coordinate equal to the mirror integers, so the
    landscape peaks there and its spread around the peak is the
    momentum-correlation width.
    """
    frames = _as_frames(frames)
    n, h, w2 = frames.shape
    w = w2 // 2
    if subsample is not None and n > subsample:
        idx = np.linspace(0, n - 1, subsample).astype(np.int64)
        frames = frames[idx]
        n = frames.shape[0]
    L = frames[:, :, :w].astype(np.float64)
    R = frames[:, :, w:].astype(np.float64)
    shape = (next_fast_len(2 * h - 1), next_fast_len(2 * w - 1))
    acc = 0.0
    # Linear convolution of L with R sums products over constant p + p'.
    batch = 256
    for i in range(0, n, batch):
        fl = rfft2(L[i : i + batch], shape, axes=(-2, -1))
        fr = rfft2(R[i : i + batch], shape, axes=(-2, -1))
        acc = acc + irfft2(fl * fr, shape, axes=(-2, -1)).sum(axis=0)
    mean_prod = acc / n
    lbar = L.mean(axis=0)
    rbar = R.mean(axis=0)
    static = irfft2(rfft2(lbar, shape) * rfft2(rbar, shape), shape)
    landscape = (mean_prod - static)[: 2 * h - 1, : 2 * w - 1]
    # Output cell (sy, sx) corresponds to full-frame sum (sx + w, sy), so
    # the full-frame sum coordinate origin (0, 0) sits at (-w, 0).
    return landscape, (w, 0)


def _quadratic_peak_offset(c_minus, c_zero, c_plus):
    denom = c_minus - 2.0 * c_zero + c_plus
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (c_minus - c_plus) / denom, -0.5, 0.5))


def find_center(
    frames,
    search_window: int = 10,
    subsample: int = 4000,
    min_frames: int = 1000,
    z_threshold: float = 6.0,
    center_hint: tuple[float, float] | None = None,
) -> Registration:
    """Locate the symmetric centre from the cross-covariance landscape.

    A coarse integer peak is found inside ``search_window`` cells of the
    hinted centre (geometric centre by default), then refined to sub-pixel
    precision with a per-axis quadratic fit. The peak-to-second-peak ratio
    is reported as the confidence. A landscape whose peak is not
    significant (below ``z_threshold`` robust sigmas of the window) raises
    :class:`NoSignalError`.
    """
    frames = _as_frames(frames)
    n, h, w2 = frames.shape
    w = w2 // 2
    if n < min_frames:
        raise InsufficientDataError(f"centre search needs at least {min_frames} frames, got {n}")
    if center_hint is None:
        center_hint = (float(w), h / 2.0)

    landscape, (off_x, off_y) = sum_coordinate_landscape(frames, subsample=subsample)
    # Window around the sum coordinate implied by the hinted centre.
    sx0 = int(np.rint(2.0 * center_hint[0])) - 1 - off_x
    sy0 = int(np.rint(2.0 * center_hint[1])) - 1 - off_y
    ys = slice(max(0, sy0 - search_window), min(landscape.shape[0], sy0 + search_window + 1))
    xs = slice(max(0, sx0 - search_window), min(landscape.shape[1], sx0 + search_window + 1))
    window = landscape[ys, xs]
    if window.size < 9:
        raise ValidationError("search window does not fit inside the detector")

    med = float(np.median(window))
    mad = float(np.median(np.abs(window - med)))
    scale = 1.4826 * mad if mad > 0 else float(window.std()) or 1.0
    peak_flat = int(np.argmax(window))
    py, px = np.unravel_index(peak_flat, window.shape)
    peak = float(window[py, px])
    z = (peak - med) / scale
    if z < z_threshold:
        raise NoSignalError(
            f"no significant coincidence peak (z = {z:.2f} < {z_threshold}); "
            "is the pair rate zero?"
        )

    masked = window.copy()
    y_lo, y_hi = max(0, py - 2), min(window.shape[0], py + 3)
    x_lo, x_hi = max(0, px - 2), min(window.shape[1], px + 3)
    masked[y_lo:y_hi, x_lo:x_hi] = -np.inf
    second = float(masked.max())
    confidence = (peak - med) / (second - med) if second > med else float("inf")

    gy = ys.start + py
    gx = xs.start + px
    dx = dy = 0.0
    if 0 < gx < landscape.shape[1] - 1:
        dx = _quadratic_peak_offset(landscape[gy, gx - 1], peak, landscape[gy, gx + 1])
    if 0 < gy < landscape.shape[0] - 1:
        dy = _quadratic_peak_offset(landscape[gy - 1, gx], peak, landscape[gy + 1, gx])
    sum_x = gx + off_x + dx
    sum_y = gy + off_y + dy
    center = ((sum_x + 1.0) / 2.0, (sum_y + 1.0) / 2.0)
    return Registration(center=center, frame_shape=(h, w2), confidence=confidence)


def classical_image(
    frames,
    background_offset: float,
    photons_per_count: float | None = None,
) -> ClassicalImage:
    """Mean left-region image with the camera offset subtracted.

    Applying the calibration slope converts the image to the photon domain.
    """
    frames = _as_frames(frames)
    w = frames.shape[2] // 2
    values = frames[:, :, :w].mean(axis=0, dtype=np.float64) - background_offset
    domain = "counts"
    if photons_per_count is not None:
        check_positive(photons_per_count, "photons_per_count")
        values = values * photons_per_count
        domain = "photons"
    return ClassicalImage(values=values, n_frames=frames.shape[0], domain=domain)


def _resolve_registration(frames, center, search_window, subsample, min_frames):
    h, w2 = frames.shape[1:]
    if isinstance(center, Registration):
        return center
    if center == "auto":
        return find_center(
            frames, search_window=search_window, subsample=subsample, min_frames=min_frames
        )
    if center == "geometric":
        return Registration(center=(w2 / 2.0, h / 2.0), frame_shape=(h, w2))
    cx, cy = center
    return Registration(center=(float(cx), float(cy)), frame_shape=(h, w2))


class CovarianceReconstructor(BaseEstimator):
    """Covariance coincidence-image estimator over detector frames.

    Parameters
    ----------
    center : "auto", "geometric", (cx, cy) or Registration
        Symmetric centre. "auto" locates it from the fitted stack.
    search_window : int
        Half width (pixels) of the centre search window around the hint.
    center_subsample : int
        Frames used for the centre search landscape.
    photons_per_count : float, optional
        Calibration slope; when given the image is reported in squared
        photon units instead of squared counts.

    Attributes
    ----------
    registration_ : Registration
    accumulator_ : CovarianceAccumulator
    image_ : CoincidenceImage
    n_frames_ : int
    """

    _estimator_name = "covariance"
    _shifted = False

    def __init__(
        self,
        center="geometric",
        search_window=10,
        center_subsample=4000,
        min_center_frames=1000,
        photons_per_count=None,
    ):
        self.center = center
        self.search_window = search_window
        self.center_subsample = center_subsample
        self.min_center_frames = min_center_frames
        self.photons_per_count = photons_per_count

    def fit(self, X, y=None):
        """Reset and accumulate the full stack, then finalize the image."""
        frames = _as_frames(X)
        self.registration_ = _resolve_registration(
            frames, self.center, self.search_window, self.center_subsample, self.min_center_frames
        )
        self.accumulator_ = CovarianceAccumulator(
            registration=self.registration_, shifted=self._shifted
        )
        accumulate(self.accumulator_, frames)
        self.n_frames_ = self.accumulator_.n
        self.image_ = self._finalize()
        return self

    def partial_fit(self, X, y=None):
        """Accumulate an additional batch of frames.

        The registration is resolved on the first batch; with
        ``center="auto"`` that batch must be large enough for the centre
        search, otherwise pass an explicit centre.
        """
        frames = _as_frames(X)
        if not hasattr(self, "accumulator_"):
            self.registration_ = _resolve_registration(
                frames,
                self.center,
                self.search_window,
                self.center_subsample,
                self.min_center_frames,
            )
            self.accumulator_ = CovarianceAccumulator(
                registration=self.registration_, shifted=self._shifted
            )
        accumulate(self.accumulator_, frames)
        self.n_frames_ = self.accumulator_.n
        if self.accumulator_.n >= 2:
            self.image_ = self._finalize()
        return self

    def _finalize(self) -> CoincidenceImage:
        return finalize_covariance(self.accumulator_, self.photons_per_count)


class ShiftedProductReconstructor(CovarianceReconstructor):
    """Frame-shifted accidental-subtraction baseline estimator."""

    _estimator_name = "shifted_product"
    _shifted = True

    def _finalize(self) -> CoincidenceImage:
        return finalize_shifted_product(self.accumulator_, self.photons_per_count)


def shifted_product_baseline(
    frames, registration: Registration, photons_per_count: float | None = None
) -> CoincidenceImage:
    """One-shot shifted-product baseline over a stack."""
    acc = CovarianceAccumulator(registration=registration, shifted=True)
    accumulate(acc, _as_frames(frames))
    return finalize_shifted_product(acc, photons_per_count)


def covariance_image(
    frames, registration: Registration, photons_per_count: float | None = None
) -> CoincidenceImage:
    """One-shot covariance image over a stack."""
    acc = CovarianceAccumulator(registration=registration)
    accumulate(acc, _as_frames(frames))
    return finalize_covariance(acc, photons_per_count)


class ClassicalImager(BaseEstimator):
    """Mean-image estimator for the classical (single-arm) view."""

    def __init__(self, background_offset=467.0, photons_per_count=None):
        self.background_offset = background_offset
        self.photons_per_count = photons_per_count

    def fit(self, X, y=None):
        frames = _as_frames(X)
        w = frames.shape[2] // 2
        self._sum = frames[:, :, :w].sum(axis=0, dtype=np.float64)
        self.n_frames_ = frames.shape[0]
        self._refresh()
        return self

    def partial_fit(self, X, y=None):
        frames = _as_frames(X)
        w = frames.shape[2] // 2
        batch = frames[:, :, :w].sum(axis=0, dtype=np.float64)
        if hasattr(self, "_sum"):
            self._sum += batch
            self.n_frames_ += frames.shape[0]
        else:
            self._sum = batch
            self.n_frames_ = frames.shape[0]
        self._refresh()
        return self

    def _refresh(self):
        values = self._sum / self.n_frames_ - self.background_offset
        domain = "counts"
        if self.photons_per_count is not None:
            values = values * self.photons_per_count
            domain = "photons"
        self.image_ = ClassicalImage(values=values, n_frames=self.n_frames_, domain=domain)
