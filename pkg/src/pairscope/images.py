"""Containers for rendered and reconstructed images.

Both the analytic renders and the frame-stack estimators produce these, so
they live in their own module to keep imports one-directional.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_array


@dataclass
class ClassicalImage:
    """Single-arm intensity image (direct wide-field view of the object)."""

    values: np.ndarray
    n_frames: int = 0
    domain: str = "model"  # model | counts | photons
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = check_array(self.values, "values", ndim=2)


@dataclass
class CoincidenceImage:
    """Pairwise coincidence-intensity image.

    ``values`` may contain negative entries when produced by a statistical
    estimator; they are preserved, not clamped.
    """

    values: np.ndarray
    n_frames: int = 0
    estimator: str = "model"  # model | covariance | shifted_product | ledger
    domain: str = "model"  # model | counts2 | photons2 | rate
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = check_array(self.values, "values", ndim=2)
