"""pairscope: biphoton coincidence microscopy, simulated end to end.

A Monte Carlo model of an entangled-pair wide-field microscope (pair source,
two balanced arms, EMCCD camera) together with the covariance estimator that
recovers the coincidence image from raw frames, plus the metrics used to
score it (CNR, edge-fit resolution, momentum-correlation width).
"""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    DegenerateImageError,
    FormatError,
    InsufficientDataError,
    NoSignalError,
    PairscopeError,
    PlacementError,
    TruncationError,
    UndefinedCnrError,
    ValidationError,
)
from .estimation import (
    ClassicalImager,
    CovarianceAccumulator,
    CovarianceReconstructor,
    Registration,
    ShiftedProductReconstructor,
    accumulate,
    classical_image,
    covariance_image,
    finalize_covariance,
    finalize_shifted_product,
    find_center,
    merge,
    shifted_product_baseline,
)
from .images import ClassicalImage, CoincidenceImage
from .metrics import (
    CnrResult,
    EsfFit,
    MomentumWidthResult,
    Roi,
    cnr,
    cnr_protocol,
    cnr_samples,
    edge_profile,
    fit_esf,
    fwhm_resolution,
    momentum_corr_width,
    normalize,
)
from .optics import (
    IlluminationField,
    ObjectMask,
    OpticalParams,
    PsfKernel,
    SourceProfile,
    illumination_fields,
    make_gaussian_psf,
    make_test_scene,
    psf_fwhm,
    render_classical,
    render_coincidence,
)
from .pipeline import RunResult, run_pipeline, reconstruct_file, reconstruct_stack
from .simulate import (
    DetectorModel,
    FrameStack,
    PairLedger,
    SimulationPlan,
    Simulation,
    SpdcParams,
    StrayLightModel,
    detect_pairs,
    generate_speckle,
    reading_to_photons,
    sample_pair_births,
    simulate_ledger,
    simulate_stack,
    synthesize_frame,
)

__all__ = [name for name in dir() if not name.startswith("_")]
