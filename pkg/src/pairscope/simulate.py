"""Monte Carlo model of the pair source, the two arms, and the camera.

A photon pair is generated with a common centroid and an anti-symmetric
split. Writing the signal and idler landing positions (object-plane
referred) as::

    signal = rho + eta + s        idler = rho + eta - s   (then mirrored)

with ``eta ~ N(0, sigma_c^2 I)`` the shared centroid jitter and
``s ~ N(0, split_sigma^2 I)`` the split, three facts hold at once:

* the single-arm (marginal) blur has variance ``sigma_c^2 + split_sigma^2``,
  which with the default split equals the classical PSF variance;
* pairs that land on mirrored pixels (coincidences) are distributed around
  the true position with ``sigma_c``, the half-wavelength PSF, which is the
  two-photon resolution gain and cannot be produced by independent per-photon
  ray tracing;
* the sum coordinate ``signal + mirror(idler)`` spreads with
  ``2 * split_sigma`` per axis, the measurable momentum-correlation width.

Detected photons are turned into camera frames with a standard EMCCD chain:
quantum-efficiency thinning, Poisson stray light from a static speckle map,
Gamma-distributed electron-multiplying gain, Gaussian read noise around a
fixed offset, and 16-bit clipping.

Frame ``i`` of a run draws from its own counter-based random substreams
keyed by ``(seed, i)`` (pair propagation and camera noise each get one), so
any batching or parallel schedule reproduces identical output bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from ._validation import check_nonnegative, check_positive
from .errors import ValidationError
from .optics import GAUSSIAN_FWHM_PER_SIGMA, ObjectMask, OpticalParams, psf_fwhm

# Stream tags for per-run (not per-frame) random draws. Frame indices occupy
# the low range, so tags keep the high bit set.
_TAG_SPECKLE = np.uint64(1) << np.uint64(63)

DEFAULT_BACKGROUND_OFFSET = 467.0
DEFAULT_PHOTONS_PER_COUNT = 0.037


def frame_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for one frame of one run."""
    key = np.array([np.uint64(seed), np.uint64(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def synth_rng(seed: int, index: int) -> np.random.Generator:
    """Camera-noise substream of frame ``index``.

    Same key as :func:`frame_rng` with the counter advanced past anything the
    pair-propagation draws can reach, so the two substreams never overlap.
    """
    key = np.array([np.uint64(seed), np.uint64(index)], dtype=np.uint64)
    bg = np.random.Philox(key=key)
    bg.advance(1 << 64)
    return np.random.Generator(bg)


class _FrameStreams:
    """Re-keyed Philox generator, draw-identical to the per-frame streams.

    Re-keying a cached bit generator avoids the construction overhead of a
    fresh one in the per-frame loop; the produced streams are bit-identical
    to ``frame_rng(seed, index)`` / ``synth_rng(seed, index)``.
    """

    def __init__(self, seed: int):
        self._bg = np.random.Philox(key=np.array([np.uint64(seed), 0], dtype=np.uint64))
        self._gen = np.random.Generator(self._bg)
        self._state = self._bg.state

    def _reset(self, index: int, counter_word: int) -> np.random.Generator:
        st = self._state
        st["state"]["key"][1] = np.uint64(index)
        st["state"]["counter"][:] = 0
        st["state"]["counter"][1] = np.uint64(counter_word)
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self._bg.state = st
        return self._gen

    def rng(self, index: int) -> np.random.Generator:
        return self._reset(index, 0)

    def synth(self, index: int) -> np.random.Generator:
        return self._reset(index, 1)


@dataclass(frozen=True)
class SpdcParams:
    """Pair-source parameters.

    Parameters
    ----------
    pair_rate : float
        Mean pairs generated per frame (Poisson).
    split_sigma_um : float or (float, float), optional
        Per-axis standard deviation of the anti-symmetric split offset, the
        phenomenological momentum-correlation width knob. ``None`` derives
        the value from the optics so that the single-arm blur matches the
        classical PSF exactly; overriding it relaxes that invariant.
    center : (float, float), optional
        Symmetric-centre coordinate in full-frame (binned) pixels, sub-pixel
        precision. ``None`` uses the geometric centre of the detector.
    """

    pair_rate: float = 1000.0
    split_sigma_um: float | tuple[float, float] | None = None
    center: tuple[float, float] | None = None

    def __post_init__(self):
        check_nonnegative(self.pair_rate, "pair_rate")
        if self.split_sigma_um is not None:
            for v in np.atleast_1d(np.asarray(self.split_sigma_um, dtype=float)):
                check_nonnegative(v, "split_sigma_um")

    def split_sigmas(self, optics: OpticalParams) -> tuple[float, float]:
        """Resolved per-axis split in micrometres."""
        if self.split_sigma_um is None:
            sigma_classical = psf_fwhm(optics, "classical") / GAUSSIAN_FWHM_PER_SIGMA
            sigma_pair = psf_fwhm(optics, "biphoton") / GAUSSIAN_FWHM_PER_SIGMA
            s = float(np.sqrt(sigma_classical**2 - sigma_pair**2))
            return (s, s)
        arr = np.atleast_1d(np.asarray(self.split_sigma_um, dtype=float))
        if arr.size == 1:
            return (float(arr[0]), float(arr[0]))
        if arr.size == 2:
            return (float(arr[0]), float(arr[1]))
        raise ValidationError("split_sigma_um must be a scalar or a pair")


@dataclass(frozen=True)
class DetectorModel:
    """EMCCD model for the two detection regions.

    ``width`` and ``height`` are the pixels of one region (left and right
    each) on the binned output grid. ``photons_per_count`` is the measured
    calibration slope relating net reading to incident photons; the
    reading-domain gain per photoelectron defaults to its inverse.
    """

    width: int = 100
    height: int = 50
    background_offset: float = DEFAULT_BACKGROUND_OFFSET
    photons_per_count: float = DEFAULT_PHOTONS_PER_COUNT
    em_gain: float | None = None
    read_noise_sigma: float = 10.0
    quantum_efficiency: float = 1.0
    saturation: int = 65535
    bin_factor: int = 2

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError("detector region must be at least 1x1 pixels")
        check_nonnegative(self.background_offset, "background_offset")
        check_positive(self.photons_per_count, "photons_per_count")
        if self.em_gain is not None:
            check_positive(self.em_gain, "em_gain")
        check_nonnegative(self.read_noise_sigma, "read_noise_sigma")
        if not 0.0 <= self.quantum_efficiency <= 1.0:
            raise ValidationError("quantum_efficiency must lie in [0, 1]")
        if self.saturation < 1 or self.saturation > 65535:
            raise ValidationError("saturation must lie in [1, 65535]")
        if self.bin_factor < 1:
            raise ValidationError("bin_factor must be >= 1")

    @property
    def em_gain_counts(self) -> float:
        """Mean reading counts per photoelectron."""
        if self.em_gain is not None:
            return self.em_gain
        return 1.0 / self.photons_per_count

    @property
    def frame_shape(self) -> tuple[int, int]:
        """(height, width) of one full frame, left and right concatenated."""
        return (self.height, 2 * self.width)


@dataclass(frozen=True)
class StrayLightModel:
    """Uncorrelated stray light falling on the detection plane.

    The speckle pattern is static within a run (the hardest case for the
    covariance estimator, since only shot noise then decorrelates frames)
    and Poisson photon noise is drawn per frame on top of it.
    """

    mean_photons: float = 0.0
    corr_length_px: float = 3.0
    static_map: np.ndarray | None = None

    def __post_init__(self):
        check_nonnegative(self.mean_photons, "mean_photons")
        if self.mean_photons > 0:
            check_positive(self.corr_length_px, "corr_length_px")

    def realize(self, shape, rng) -> "StrayLightModel":
        """Return a copy with a concrete static map for ``shape``."""
        m = generate_speckle(self.mean_photons, self.corr_length_px, shape, rng)
        return replace(self, static_map=m)


def reading_to_photons(net_reading, photons_per_count: float = DEFAULT_PHOTONS_PER_COUNT):
    """Convert offset-subtracted camera readings to incident photons.

    Linear calibration: ``photons = slope * net_reading``. Negative inputs
    from noise fluctuations map to negative photon numbers and are kept.
    """
    check_positive(photons_per_count, "photons_per_count")
    return np.multiply(net_reading, photons_per_count)


def generate_speckle(mean_intensity: float, corr_length_px: float, shape, rng) -> np.ndarray:
    """Static speckle map with the requested mean and correlation length.

    Low-pass filtered white noise is squared (fully developed speckle has
    intensity that is the squared magnitude of a Gaussian field) and rescaled
    exactly to ``mean_intensity``. The filter width is chosen so the
    intensity autocorrelation FWHM lands near ``corr_length_px``.
    """
    check_nonnegative(mean_intensity, "mean_intensity")
    shape = (int(shape[0]), int(shape[1]))
    if mean_intensity == 0.0:
        return np.zeros(shape, dtype=float)
    if corr_length_px < 1.0:
        raise ValidationError("corr_length_px must be >= 1 pixel")
    sigma_filter = corr_length_px / GAUSSIAN_FWHM_PER_SIGMA
    noise = rng.normal(size=shape)
    field_map = ndimage.gaussian_filter(noise, sigma=sigma_filter, mode="wrap")
    intensity = field_map**2
    intensity *= mean_intensity / intensity.mean()
    return intensity


def sample_pair_births(spdc: SpdcParams, extent_um, rng) -> np.ndarray:
    """Draw one frame's pair birth positions, uniform over the extent.

    Returns a (k, 2) array of (x, y) object-plane micrometre positions with
    ``k ~ Poisson(pair_rate)``.
    """
    k = int(rng.poisson(spdc.pair_rate)) if spdc.pair_rate > 0 else 0
    if k == 0:
        return np.empty((0, 2), dtype=np.float32)
    pos = rng.random((k, 2), dtype=np.float32)
    pos[:, 0] *= np.float32(extent_um[0])
    pos[:, 1] *= np.float32(extent_um[1])
    return pos


@dataclass
class PairLedger:
    """Ground-truth record of the simulated pairs.

    Keeps per-pixel sufficient statistics of the true registered-coincidence
    counts (sum and sum of squares across frames, so both the mean rate and
    its frame-to-frame variance are recoverable), the sum-coordinate
    histograms, and optionally the individual pair records.
    """

    shape: tuple[int, int]
    n_frames: int = 0
    total_pairs: int = 0
    transmitted_pairs: int = 0
    detected_pairs: int = 0  # transmitted with both photons in bounds
    lost_pairs: int = 0  # transmitted with at least one photon out of bounds
    registered_pairs: int = 0
    coincidence_sum: np.ndarray = None
    coincidence_sumsq: np.ndarray = None
    sum_hist_x: np.ndarray = None
    sum_hist_y: np.ndarray = None
    record_pairs: bool = False
    records: list = field(default_factory=list)

    def __post_init__(self):
        h, w = self.shape
        if self.coincidence_sum is None:
            self.coincidence_sum = np.zeros((h, w), dtype=np.int64)
        if self.coincidence_sumsq is None:
            self.coincidence_sumsq = np.zeros((h, w), dtype=np.int64)
        if self.sum_hist_x is None:
            self.sum_hist_x = np.zeros(4 * w + 3, dtype=np.int64)
        if self.sum_hist_y is None:
            self.sum_hist_y = np.zeros(4 * h + 3, dtype=np.int64)

    @property
    def sum_hist_offset(self) -> tuple[int, int]:
        """Index of sum-coordinate 0 in the x and y histograms."""
        return (2 * self.shape[1] + 1, 2 * self.shape[0] + 1)

    def mean_rate(self) -> np.ndarray:
        """Mean registered coincidences per pixel per frame."""
        if self.n_frames < 1:
            raise ValidationError("ledger holds no frames")
        return self.coincidence_sum / self.n_frames

    def rate_variance(self) -> np.ndarray:
        """Per-pixel frame-to-frame variance of the coincidence counts."""
        if self.n_frames < 2:
            raise ValidationError("need at least 2 frames for a variance")
        n = self.n_frames
        return self.coincidence_sumsq / n - (self.coincidence_sum / n) ** 2

    def merge(self, other: "PairLedger") -> "PairLedger":
        if other.shape != self.shape:
            raise ValidationError("cannot merge ledgers with different shapes")
        out = PairLedger(shape=self.shape, record_pairs=self.record_pairs or other.record_pairs)
        out.n_frames = self.n_frames + other.n_frames
        out.total_pairs = self.total_pairs + other.total_pairs
        out.transmitted_pairs = self.transmitted_pairs + other.transmitted_pairs
        out.detected_pairs = self.detected_pairs + other.detected_pairs
        out.lost_pairs = self.lost_pairs + other.lost_pairs
        out.registered_pairs = self.registered_pairs + other.registered_pairs
        out.coincidence_sum = self.coincidence_sum + other.coincidence_sum
        out.coincidence_sumsq = self.coincidence_sumsq + other.coincidence_sumsq
        out.sum_hist_x = self.sum_hist_x + other.sum_hist_x
        out.sum_hist_y = self.sum_hist_y + other.sum_hist_y
        out.records = list(self.records) + list(other.records)
        return out


@dataclass
class FrameStack:
    """Materialized sequence of full detector frames."""

    frames: np.ndarray  # (n, height, 2*width) uint16
    detector: DetectorModel
    seed: int
    pixel_pitch_um: float
    center: tuple[float, float]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 3 or f.shape[0] < 1:
            raise ValidationError("frames must be a non-empty (n, height, width) array")
        if f.dtype != np.uint16:
            raise ValidationError("frames must be uint16")
        if f.max(initial=0) > self.detector.saturation:
            raise ValidationError("frame values exceed detector saturation")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def detect_pairs(
    births_um: np.ndarray,
    mask: ObjectMask,
    sigma_c_um: float,
    split_sigma_um: tuple[float, float],
    center: tuple[float, float],
    detector: DetectorModel,
    rng,
):
    """Propagate one frame's pairs to detector pixel cells.

    Returns a dict of per-pair arrays: signal cells ``s_cell`` and idler
    cells ``i_cell`` as (k, 2) ints in full-frame coordinates, plus boolean
    flags ``transmitted``, ``s_in``, ``i_in`` and ``registered``. The signal
    photon survives the object with probability ``t(rho)**2``; the idler
    never traverses the object and always propagates. A photon whose cell
    falls outside its region is dropped (no hit) but the pair remains in the
    ledger tallies.

    The pixel grid uses the edge convention (cell ``i`` covers
    ``[i, i+1)`` pixel units). On that grid, quantizing at the output pitch
    is identical to quantizing on a ``bin_factor`` finer grid and summing
    blocks, since ``floor(floor(b*x)/b) == floor(x)``; the hardware binning
    step therefore needs no explicit fine grid.
    """
    k = births_um.shape[0]
    h, w = detector.height, detector.width
    pitch = mask.pixel_pitch_um
    out = {
        "s_cell": np.empty((k, 2), dtype=np.int64),
        "i_cell": np.empty((k, 2), dtype=np.int64),
        "transmitted": np.zeros(k, dtype=bool),
        "s_in": np.zeros(k, dtype=bool),
        "i_in": np.zeros(k, dtype=bool),
        "registered": np.zeros(k, dtype=bool),
    }
    if k == 0:
        return out

    # Amplitude transmission sampled at the birth pixel.
    ix = np.clip((births_um[:, 0] / pitch).astype(np.int64), 0, w - 1)
    iy = np.clip((births_um[:, 1] / pitch).astype(np.int64), 0, h - 1)
    amp = mask.transmission[iy, ix]
    transmitted = rng.random(k) < amp**2

    # One block of standard normals scaled per column: centroid x/y, split x/y.
    # float32 is materially faster and keeps positions good to ~1e-5 px.
    z = rng.standard_normal((k, 4), dtype=np.float32)
    centroid_px = (births_um / pitch).astype(np.float32)
    centroid_px += z[:, :2] * np.float32(sigma_c_um / pitch)
    split_px = z[:, 2:4]
    split_px[:, 0] *= np.float32(split_sigma_um[0] / pitch)
    split_px[:, 1] *= np.float32(split_sigma_um[1] / pitch)
    u = centroid_px + split_px  # signal, left-region pixel coordinates
    v = centroid_px - split_px  # idler before mirroring

    cx, cy = center
    s_cell = np.floor(u).astype(np.int64)
    i_cell = np.empty_like(s_cell)
    i_cell[:, 0] = np.floor(2.0 * cx - v[:, 0]).astype(np.int64)
    i_cell[:, 1] = np.floor(2.0 * cy - v[:, 1]).astype(np.int64)

    s_in = (
        (s_cell[:, 0] >= 0) & (s_cell[:, 0] < w) & (s_cell[:, 1] >= 0) & (s_cell[:, 1] < h)
    )
    i_in = (
        (i_cell[:, 0] >= w)
        & (i_cell[:, 0] < 2 * w)
        & (i_cell[:, 1] >= 0)
        & (i_cell[:, 1] < h)
    )

    # Integer-granularity mirror map implied by the continuous centre.
    kx = int(np.rint(2.0 * cx)) - 1
    ky = int(np.rint(2.0 * cy)) - 1
    registered = (
        transmitted
        & s_in
        & i_in
        & (s_cell[:, 0] + i_cell[:, 0] == kx)
        & (s_cell[:, 1] + i_cell[:, 1] == ky)
    )

    out["s_cell"] = s_cell
    out["i_cell"] = i_cell
    out["transmitted"] = transmitted
    out["s_in"] = s_in
    out["i_in"] = i_in
    out["registered"] = registered
    return out


def synthesize_frame(
    hit_cells: np.ndarray, detector: DetectorModel, stray_map: np.ndarray | None, rng
) -> np.ndarray:
    """Turn landed photon cells into one uint16 camera frame.

    Each hit becomes a photoelectron with probability ``quantum_efficiency``;
    stray light adds per-pixel Poisson photoelectrons from the static map.
    The electron-multiplying register amplifies ``n`` photoelectrons into
    Gamma(n, gain) counts (the standard excess-noise model, consistent with
    a linear photons-per-count calibration), and Gaussian read noise around
    the background offset is added before clipping and quantization.
    """
    h, w2 = detector.frame_shape
    qe = detector.quantum_efficiency
    if hit_cells.shape[0]:
        cells = hit_cells
        if qe < 1.0:
            cells = cells[rng.random(cells.shape[0]) < qe]
        flat = cells[:, 1] * w2 + cells[:, 0]
        pe = np.bincount(flat, minlength=h * w2).astype(np.int64).reshape(h, w2)
    else:
        pe = np.zeros((h, w2), dtype=np.int64)
    if stray_map is not None:
        pe += rng.poisson(stray_map * qe)

    counts = np.zeros((h, w2), dtype=np.float64)
    nz = pe > 0
    if np.any(nz):
        pe_nz = pe[nz]
        gain = detector.em_gain_counts
        amplified = np.empty(pe_nz.size)
        single = pe_nz == 1
        n_single = int(np.count_nonzero(single))
        # Gamma(1, g) is Exponential(g); drawing singles separately is faster.
        if n_single:
            amplified[single] = rng.exponential(gain, n_single)
        if n_single < pe_nz.size:
            multi = ~single
            amplified[multi] = rng.gamma(shape=pe_nz[multi], scale=gain)
        counts[nz] = amplified
    read = rng.standard_normal((h, w2), dtype=np.float32)
    counts += read * detector.read_noise_sigma
    counts += detector.background_offset
    np.rint(counts, out=counts)
    np.clip(counts, 0, detector.saturation, out=counts)
    return counts.astype(np.uint16)


@dataclass(frozen=True)
class SimulationPlan:
    """Everything needed to generate a reproducible run."""

    scene: ObjectMask
    optics: OpticalParams
    spdc: SpdcParams
    detector: DetectorModel
    stray: StrayLightModel | None
    n_frames: int
    seed: int
    record_pairs: bool = False

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValidationError("n_frames must be >= 1")
        if self.scene.shape != (self.detector.height, self.detector.width):
            raise ValidationError(
                f"scene shape {self.scene.shape} must match the detector region "
                f"{(self.detector.height, self.detector.width)}"
            )
        if abs(self.scene.pixel_pitch_um - self.optics.pixel_pitch_um) > 1e-12:
            raise ValidationError("scene and optics pixel pitch disagree")

    @property
    def center(self) -> tuple[float, float]:
        if self.spdc.center is not None:
            return (float(self.spdc.center[0]), float(self.spdc.center[1]))
        return (float(self.detector.width), self.detector.height / 2.0)


class Simulation:
    """Deterministic frame factory for one plan.

    Every frame owns two random substreams keyed by ``(seed, index)``: the
    pair-propagation draws and the camera-noise draws. Frames therefore
    depend only on the plan and their index and may be generated in any
    order, in any batch size, or in parallel, with bit-identical results.
    Ledger updates commute across frames.

    ``frames_chunk`` is the workhorse: it draws per frame but vectorizes the
    propagation, ledger, and camera assembly across the whole chunk, which
    matters on small frames where per-call overhead dominates.
    """

    def __init__(self, plan: SimulationPlan):
        self.plan = plan
        det = plan.detector
        self.sigma_c_um = psf_fwhm(plan.optics, "biphoton") / GAUSSIAN_FWHM_PER_SIGMA
        self.split_um = plan.spdc.split_sigmas(plan.optics)
        self.extent_um = plan.scene.extent_um
        self.center = plan.center
        self.stray_map = None
        if plan.stray is not None and plan.stray.mean_photons > 0:
            if plan.stray.static_map is not None:
                self.stray_map = plan.stray.static_map
            else:
                rng = frame_rng(plan.seed, _TAG_SPECKLE)
                self.stray_map = generate_speckle(
                    plan.stray.mean_photons, plan.stray.corr_length_px, det.frame_shape, rng
                )
        self.ledger = PairLedger(
            shape=(det.height, det.width), record_pairs=plan.record_pairs
        )
        self._streams = _FrameStreams(plan.seed)
        self._t2 = plan.scene.transmission**2

    # -- pair propagation -----------------------------------------------

    def _detect_chunk(self, lo: int, hi: int) -> dict:
        """Draw frames [lo, hi) pair by pair, propagate them in one pass."""
        plan = self.plan
        det = plan.detector
        rate = plan.spdc.pair_rate
        n = hi - lo
        ks = np.zeros(n, dtype=np.int64)
        pos_parts, trans_parts, z_parts = [], [], []
        for j in range(n):
            rng = self._streams.rng(lo + j)
            k = int(rng.poisson(rate)) if rate > 0 else 0
            ks[j] = k
            if k:
                pos = rng.random((k, 2), dtype=np.float32)
                pos[:, 0] *= np.float32(self.extent_um[0])
                pos[:, 1] *= np.float32(self.extent_um[1])
                pos_parts.append(pos)
                trans_parts.append(rng.random(k))
                z_parts.append(rng.standard_normal((k, 4), dtype=np.float32))
        total = int(ks.sum())
        out = {"ks": ks, "frame_of": np.repeat(np.arange(n, dtype=np.int64), ks)}
        if total == 0:
            out.update(
                births=np.empty((0, 2), dtype=np.float32),
                s_cell=np.empty((0, 2), dtype=np.int64),
                i_cell=np.empty((0, 2), dtype=np.int64),
                transmitted=np.zeros(0, dtype=bool),
                s_in=np.zeros(0, dtype=bool),
                i_in=np.zeros(0, dtype=bool),
                registered=np.zeros(0, dtype=bool),
            )
            return out

        births = np.concatenate(pos_parts)
        trans_u = np.concatenate(trans_parts)
        z = np.concatenate(z_parts)
        h, w = det.height, det.width
        pitch = plan.scene.pixel_pitch_um
        inv_pitch = np.float32(1.0 / pitch)

        ix = (births[:, 0] * inv_pitch).astype(np.int32)
        np.clip(ix, 0, w - 1, out=ix)
        iy = (births[:, 1] * inv_pitch).astype(np.int32)
        np.clip(iy, 0, h - 1, out=iy)
        transmitted = trans_u < self._t2[iy, ix]

        # In-place float32 position math: centroid in base, split in z[:, 2:4].
        eta = z[:, :2]
        eta *= np.float32(self.sigma_c_um / pitch)
        split_px = z[:, 2:4]
        split_px[:, 0] *= np.float32(self.split_um[0] / pitch)
        split_px[:, 1] *= np.float32(self.split_um[1] / pitch)
        base = births * inv_pitch
        base += eta
        u = base + split_px
        base -= split_px  # base is now the idler-side coordinate v

        cx, cy = self.center
        np.floor(u, out=u)
        s_cell = u.astype(np.int32)
        base *= np.float32(-1.0)
        base[:, 0] += np.float32(2.0 * cx)
        base[:, 1] += np.float32(2.0 * cy)
        np.floor(base, out=base)
        i_cell = base.astype(np.int32)
        s_in = (
            (s_cell[:, 0] >= 0) & (s_cell[:, 0] < w)
            & (s_cell[:, 1] >= 0) & (s_cell[:, 1] < h)
        )
        i_in = (
            (i_cell[:, 0] >= w) & (i_cell[:, 0] < 2 * w)
            & (i_cell[:, 1] >= 0) & (i_cell[:, 1] < h)
        )
        kx = int(np.rint(2.0 * cx)) - 1
        ky = int(np.rint(2.0 * cy)) - 1
        registered = (
            transmitted & s_in & i_in
            & (s_cell[:, 0] + i_cell[:, 0] == kx)
            & (s_cell[:, 1] + i_cell[:, 1] == ky)
        )
        out.update(
            births=births, s_cell=s_cell, i_cell=i_cell,
            transmitted=transmitted, s_in=s_in, i_in=i_in, registered=registered,
        )
        return out

    def _update_ledger(self, lo: int, hi: int, d: dict) -> None:
        led = self.ledger
        n = hi - lo
        led.n_frames += n
        led.total_pairs += int(d["ks"].sum())
        registered = d["registered"]
        if registered.shape[0] == 0:
            return
        transmitted = d["transmitted"]
        detected = transmitted & d["s_in"] & d["i_in"]
        n_trans = int(np.count_nonzero(transmitted))
        n_det = int(np.count_nonzero(detected))
        led.transmitted_pairs += n_trans
        led.detected_pairs += n_det
        led.lost_pairs += n_trans - n_det
        led.registered_pairs += int(np.count_nonzero(registered))

        h, w = led.shape
        npx = h * w
        if np.any(registered):
            sc = d["s_cell"][registered]
            flat = sc[:, 1] * w + sc[:, 0]
            # per (frame, pixel) counts without materializing an n x npx grid
            key = d["frame_of"][registered] * npx + flat
            uniq, counts = np.unique(key, return_counts=True)
            px = uniq % npx
            led.coincidence_sum.ravel()[:] += np.bincount(
                px, weights=counts, minlength=npx
            ).astype(np.int64)
            led.coincidence_sumsq.ravel()[:] += np.bincount(
                px, weights=counts * counts, minlength=npx
            ).astype(np.int64)

        if n_det:
            kx = int(np.rint(2.0 * self.center[0])) - 1
            ky = int(np.rint(2.0 * self.center[1])) - 1
            offx, offy = led.sum_hist_offset
            vx = d["s_cell"][detected, 0] + d["i_cell"][detected, 0] - kx + offx
            vy = d["s_cell"][detected, 1] + d["i_cell"][detected, 1] - ky + offy
            okx = (vx >= 0) & (vx < led.sum_hist_x.size)
            oky = (vy >= 0) & (vy < led.sum_hist_y.size)
            led.sum_hist_x += np.bincount(vx[okx], minlength=led.sum_hist_x.size)
            led.sum_hist_y += np.bincount(vy[oky], minlength=led.sum_hist_y.size)

        if led.record_pairs:
            bounds = np.concatenate([[0], np.cumsum(d["ks"])])
            for j in range(n):
                sl = slice(bounds[j], bounds[j + 1])
                if sl.start == sl.stop:
                    continue
                led.records.append(
                    {
                        "frame": lo + j,
                        "birth_um": d["births"][sl].copy(),
                        "s_cell": d["s_cell"][sl].copy(),
                        "i_cell": d["i_cell"][sl].copy(),
                        "transmitted": d["transmitted"][sl].copy(),
                        "s_in": d["s_in"][sl].copy(),
                        "i_in": d["i_in"][sl].copy(),
                        "registered": d["registered"][sl].copy(),
                    }
                )

    # -- camera ----------------------------------------------------------

    def _synthesize_chunk(self, lo: int, hi: int, d: dict) -> np.ndarray:
        plan = self.plan
        det = plan.detector
        n = hi - lo
        h, w2 = det.frame_shape
        npx = h * w2
        qe = det.quantum_efficiency
        gain = det.em_gain_counts
        stray_flat = None
        if self.stray_map is not None:
            stray_flat = (self.stray_map * qe).ravel()

        # Hit lists inherit the frame ordering of the pair arrays, so
        # per-frame groups are contiguous in each list; no sort needed.
        s_hit = d["transmitted"] & d["s_in"]
        i_hit = d["i_in"]
        s_frame = d["frame_of"][s_hit]
        i_frame = d["frame_of"][i_hit]
        s_cells = d["s_cell"][s_hit]
        i_cells = d["i_cell"][i_hit]
        s_flat = s_cells[:, 1] * w2 + s_cells[:, 0]
        i_flat = i_cells[:, 1] * w2 + i_cells[:, 0]
        edges = np.arange(n + 1)
        s_bounds = np.searchsorted(s_frame, edges)
        i_bounds = np.searchsorted(i_frame, edges)

        read = np.empty((n, npx), dtype=np.float32)
        amp_parts = []
        key_parts = []
        for j in range(n):
            rng = self._streams.synth(lo + j)
            flat_j = np.concatenate(
                [s_flat[s_bounds[j] : s_bounds[j + 1]], i_flat[i_bounds[j] : i_bounds[j + 1]]]
            )
            if qe < 1.0 and flat_j.size:
                flat_j = flat_j[rng.random(flat_j.size) < qe]
            pe = np.bincount(flat_j, minlength=npx)
            if stray_flat is not None:
                pe = pe + rng.poisson(stray_flat)
            nz = np.flatnonzero(pe)
            if nz.size:
                pe_nz = pe[nz]
                amplified = np.empty(nz.size)
                single = pe_nz == 1
                n_single = int(np.count_nonzero(single))
                # Gamma(1, g) is Exponential(g); singles drawn separately
                if n_single:
                    amplified[single] = rng.exponential(gain, n_single)
                if n_single < nz.size:
                    multi = ~single
                    amplified[multi] = rng.gamma(shape=pe_nz[multi], scale=gain)
                amp_parts.append(amplified)
                key_parts.append(j * npx + nz)
            read[j] = rng.standard_normal(npx, dtype=np.float32)

        # The read buffer doubles as the float32 output accumulator; float32
        # keeps count values exact to well below the quantization step.
        np.multiply(read, np.float32(det.read_noise_sigma), out=read)
        read += np.float32(det.background_offset)
        if amp_parts:
            keys = np.concatenate(key_parts)
            read.ravel()[keys] += np.concatenate(amp_parts).astype(np.float32)
        np.rint(read, out=read)
        np.clip(read, 0, det.saturation, out=read)
        return read.astype(np.uint16).reshape(n, h, w2)

    # -- public surface ---------------------------------------------------

    def frames_chunk(self, lo: int, hi: int) -> np.ndarray:
        """Generate frames [lo, hi) as one (hi-lo, H, 2W) uint16 batch."""
        if not 0 <= lo < hi <= self.plan.n_frames:
            raise ValidationError(f"chunk [{lo}, {hi}) outside run of {self.plan.n_frames} frames")
        d = self._detect_chunk(lo, hi)
        self._update_ledger(lo, hi, d)
        return self._synthesize_chunk(lo, hi, d)

    def frame(self, index: int) -> np.ndarray:
        return self.frames_chunk(index, index + 1)[0]

    def frames(self, start: int = 0, stop: int | None = None, batch: int = 256):
        """Yield (index, frame) over [start, stop), generated batch-wise."""
        stop = self.plan.n_frames if stop is None else stop
        for lo in range(start, stop, batch):
            hi = min(lo + batch, stop)
            chunk = self.frames_chunk(lo, hi)
            for j in range(hi - lo):
                yield lo + j, chunk[j]


def realize_plan(plan: SimulationPlan) -> SimulationPlan:
    """Bake the stray static map into the plan so workers share it.

    The map is drawn from a stream keyed by the run seed, so realizing it
    up front or separately in every worker yields the same field.
    """
    if plan.stray is None or plan.stray.mean_photons <= 0 or plan.stray.static_map is not None:
        return plan
    rng = frame_rng(plan.seed, _TAG_SPECKLE)
    stray = plan.stray.realize(plan.detector.frame_shape, rng)
    return replace(plan, stray=stray)


def simulate_stack(plan: SimulationPlan) -> tuple[FrameStack, PairLedger]:
    """Materialize a full run in memory. Suitable for small to medium runs."""
    sim = Simulation(plan)
    det = plan.detector
    frames = np.empty((plan.n_frames, det.height, 2 * det.width), dtype=np.uint16)
    batch = 512
    for lo in range(0, plan.n_frames, batch):
        hi = min(lo + batch, plan.n_frames)
        frames[lo:hi] = sim.frames_chunk(lo, hi)
    stack = FrameStack(
        frames=frames,
        detector=det,
        seed=plan.seed,
        pixel_pitch_um=plan.optics.pixel_pitch_um,
        center=sim.center,
        meta={"n_frames": plan.n_frames},
    )
    return stack, sim.ledger


def simulate_ledger(plan: SimulationPlan) -> PairLedger:
    """Run only the pair-level simulation, skipping frame synthesis.

    The ledger produced is identical to the one from :func:`simulate_stack`
    with the same plan, since camera noise draws happen after all pair draws
    within each frame's stream.
    """
    sim = Simulation(plan)
    batch = 512
    for lo in range(0, plan.n_frames, batch):
        hi = min(lo + batch, plan.n_frames)
        sim._update_ledger(lo, hi, sim._detect_chunk(lo, hi))
    return sim.ledger
