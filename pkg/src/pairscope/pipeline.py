"""Run orchestration: streaming simulation, reconstruction, and output files.

Frames are processed in fixed chunks (``chunk_frames``) whose boundaries
depend only on the run description, never on the worker count. Each chunk is
simulated and accumulated independently (every frame has its own random
stream) and partial results are merged in chunk order, so any worker count
reproduces the same bytes.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError
from .estimation import (
    CovarianceAccumulator,
    Registration,
    accumulate,
    finalize_covariance,
    finalize_shifted_product,
    find_center,
    merge,
)
from .formats import QFS_FLAG_SPLIT, QfsWriter, image_to_pgm16, read_qfs, write_pgm, write_qci
from .images import ClassicalImage, CoincidenceImage
from .simulate import PairLedger, Simulation, SimulationPlan, realize_plan


def chunk_edges(n_frames: int, chunk_frames: int, cut_points=()):
    """Fixed chunk ranges; optional cut points force extra boundaries."""
    cuts = {0, n_frames}
    cuts.update(range(0, n_frames, chunk_frames))
    for p in cut_points:
        if 0 < p <= n_frames:
            cuts.add(int(p))
    edges = sorted(cuts)
    return [(lo, hi) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]


def _simulate_chunk(plan: SimulationPlan, lo: int, hi: int, want: dict):
    """Worker task: simulate frames [lo, hi) and fold them locally."""
    sim = Simulation(plan)
    det = plan.detector
    frames = sim.frames_chunk(lo, hi)
    out = {"lo": lo, "hi": hi, "ledger": sim.ledger}
    registration = want.get("registration")
    if want.get("covariance"):
        out["covariance"] = accumulate(
            CovarianceAccumulator(registration=registration), frames
        )
    if want.get("shifted"):
        out["shifted"] = accumulate(
            CovarianceAccumulator(registration=registration, shifted=True), frames
        )
    if want.get("classical"):
        out["classical_sum"] = frames[:, :, : det.width].sum(axis=0, dtype=np.float64)
    if want.get("frames"):
        out["frames"] = frames
    return out


@dataclass
class RunResult:
    """Merged outcome of a streamed run."""

    plan: SimulationPlan
    registration: Registration
    ledger: PairLedger
    n_frames: int
    covariance: CovarianceAccumulator | None = None
    shifted: CovarianceAccumulator | None = None
    classical_sum: np.ndarray | None = None
    snapshots: dict = field(default_factory=dict)

    def covariance_image(self, photons_per_count=None) -> CoincidenceImage:
        return finalize_covariance(self.covariance, photons_per_count)

    def shifted_image(self, photons_per_count=None) -> CoincidenceImage:
        return finalize_shifted_product(self.shifted, photons_per_count)

    def classical_image(self, photons_per_count=None) -> ClassicalImage:
        det = self.plan.detector
        values = self.classical_sum / self.n_frames - det.background_offset
        domain = "counts"
        if photons_per_count is not None:
            values = values * photons_per_count
            domain = "photons"
        return ClassicalImage(values=values, n_frames=self.n_frames, domain=domain)


def run_pipeline(
    plan: SimulationPlan,
    estimators=("covariance",),
    registration: Registration | None = None,
    workers: int = 1,
    chunk_frames: int = 512,
    qfs_path=None,
    snapshot_frames=(),
    on_snapshot=None,
) -> RunResult:
    """Simulate a plan and accumulate reconstructions chunk by chunk.

    ``snapshot_frames`` lists frame counts at which partially accumulated
    estimators are finalized and handed to ``on_snapshot(n, result)``;
    boundaries are inserted so snapshots land exactly. The QFS stack is
    written incrementally when ``qfs_path`` is given, so arbitrarily long
    runs never hold all frames at once.
    """
    plan = realize_plan(plan)
    det = plan.detector
    if registration is None:
        registration = Registration(
            center=plan.center, frame_shape=(det.height, 2 * det.width)
        )
    want = {
        "registration": registration,
        "covariance": "covariance" in estimators,
        "shifted": "shifted" in estimators,
        "classical": "classical" in estimators,
        "frames": qfs_path is not None,
    }
    edges = chunk_edges(plan.n_frames, chunk_frames, cut_points=snapshot_frames)
    snapshot_set = {int(s) for s in snapshot_frames}

    result = RunResult(
        plan=plan,
        registration=registration,
        ledger=PairLedger(
            shape=(det.height, det.width), record_pairs=plan.record_pairs
        ),
        n_frames=0,
    )
    if want["covariance"]:
        result.covariance = CovarianceAccumulator(registration=registration)
    if want["shifted"]:
        result.shifted = CovarianceAccumulator(registration=registration, shifted=True)
    if want["classical"]:
        result.classical_sum = np.zeros((det.height, det.width), dtype=np.float64)

    writer = None
    if qfs_path is not None:
        writer = QfsWriter(
            qfs_path, width=2 * det.width, height=det.height, n_frames=plan.n_frames
        )

    def fold(chunk):
        result.ledger = result.ledger.merge(chunk["ledger"])
        result.n_frames = chunk["hi"]
        if want["covariance"]:
            result.covariance = merge(result.covariance, chunk["covariance"])
        if want["shifted"]:
            result.shifted = merge(result.shifted, chunk["shifted"])
        if want["classical"]:
            result.classical_sum += chunk["classical_sum"]
        if writer is not None:
            writer.append(chunk["frames"])
        if chunk["hi"] in snapshot_set and on_snapshot is not None:
            on_snapshot(chunk["hi"], result)

    try:
        if workers <= 1:
            for lo, hi in edges:
                fold(_simulate_chunk(plan, lo, hi, want))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                pending = {}
                next_idx = 0
                submitted = 0
                max_inflight = workers + 2
                while next_idx < len(edges):
                    while submitted < len(edges) and len(pending) < max_inflight:
                        lo, hi = edges[submitted]
                        pending[submitted] = pool.submit(_simulate_chunk, plan, lo, hi, want)
                        submitted += 1
                    fold(pending.pop(next_idx).result())
                    next_idx += 1
    finally:
        if writer is not None:
            if result.n_frames == plan.n_frames:
                writer.close()
            else:
                writer.abort()
    return result


def reconstruct_stack(
    frames,
    center="auto",
    estimators=("covariance",),
    chunk_frames: int = 2048,
    search_window: int = 10,
):
    """Reconstruct from an in-memory or memory-mapped frame stack.

    Returns ``(registration, accumulators)`` where accumulators maps the
    estimator name to its filled accumulator. ``center`` may be "auto",
    "geometric", an explicit ``(cx, cy)`` or a Registration.
    """
    n, h, w2 = frames.shape
    if isinstance(center, Registration):
        registration = center
    elif center == "auto":
        registration = find_center(frames, search_window=search_window)
    elif center == "geometric":
        registration = Registration(center=(w2 / 2.0, h / 2.0), frame_shape=(h, w2))
    else:
        cx, cy = center
        registration = Registration(center=(float(cx), float(cy)), frame_shape=(h, w2))

    accs = {}
    if "covariance" in estimators:
        accs["covariance"] = CovarianceAccumulator(registration=registration)
    if "shifted" in estimators:
        accs["shifted"] = CovarianceAccumulator(registration=registration, shifted=True)
    if not accs:
        raise ValidationError("no estimator selected")
    for lo in range(0, n, chunk_frames):
        batch = np.asarray(frames[lo : lo + chunk_frames])
        for acc in accs.values():
            accumulate(acc, batch)
    return registration, accs


def reconstruct_file(qfs_path, center="auto", estimators=("covariance",), **kwargs):
    frames, flags = read_qfs(qfs_path, memmap=True)
    if not flags & QFS_FLAG_SPLIT:
        raise FormatError(
            f"{qfs_path}: stack is not marked as a left/right split; cannot register"
        )
    return reconstruct_stack(frames, center=center, estimators=estimators, **kwargs)


def write_image_outputs(out_dir, name, image) -> dict:
    """Write the 16-bit preview PGM plus the raw float sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    pgm_path = os.path.join(out_dir, f"{name}.pgm")
    qci_path = os.path.join(out_dir, f"{name}.qci")
    write_pgm(pgm_path, image_to_pgm16(image.values))
    write_qci(qci_path, image.values)
    return {"pgm": pgm_path, "qci": qci_path}
