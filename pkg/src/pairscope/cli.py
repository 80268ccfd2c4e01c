"""Command line front end.

Exit codes (also listed in ``--help``):

* 0: success
* 1: unexpected internal error
* 2: invalid configuration, flags, or parameter values
* 3: malformed input file
* 4: no coincidence signal / insufficient data
* 5: analysis failure (degenerate image, undefined CNR, placement failure)

Set the ``QMC_LOG`` environment variable (DEBUG, INFO, WARNING, ERROR) to
control log verbosity. Errors print one machine-readable line to stderr of
the form ``error[<kind>]: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigError, PairscopeError, ValidationError
from .estimation import finalize_covariance, finalize_shifted_product
from .formats import (
    read_qci,
    read_qfs,
    write_fits,
    read_fits,
    write_ledger_csv,
    write_metrics_csv,
    write_qfs,
)
from .metrics import Roi, cnr_protocol, edge_profile, fit_esf, momentum_corr_width
from .pipeline import (
    reconstruct_file,
    run_pipeline,
    write_image_outputs,
)
from .simulate import reading_to_photons
from .sweeps import sweep_frames, sweep_stray

log = logging.getLogger("pairscope")

_EPILOG = __doc__


def _setup_logging():
    level_name = os.environ.get("QMC_LOG", "WARNING").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _parse_center(text):
    if text == "auto":
        return "auto"
    parts = text.split(",")
    if len(parts) != 2:
        raise ValidationError(f"--center must be 'auto' or 'cx,cy', got {text!r}")
    return (float(parts[0]), float(parts[1]))


def _parse_list(text, cast=float):
    try:
        return [cast(float(p)) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise ValidationError(f"could not parse list {text!r}") from exc


def _parse_roi_flag(text, role):
    parts = text.split(",")
    if len(parts) != 4:
        raise ValidationError(f"ROI must be 'x,y,w,h', got {text!r}")
    x, y, w, h = (int(p) for p in parts)
    return Roi(x, y, w, h, role=role)


def _load_image(path):
    if path.endswith(".qci"):
        return read_qci(path)
    if path.endswith(".pgm"):
        from .formats import read_pgm

        values, _ = read_pgm(path)
        return values.astype(float)
    raise ValidationError(f"unsupported image format for {path!r} (use .qci or .pgm)")


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    plan = cfg.plan(seed=args.seed)
    out_dir = args.output or cfg.output
    os.makedirs(out_dir, exist_ok=True)
    qfs_path = os.path.join(out_dir, "stack.qfs")
    workers = args.workers or cfg.workers
    result = run_pipeline(
        plan, estimators=(), workers=workers, chunk_frames=cfg.chunk_frames, qfs_path=qfs_path
    )
    ledger_path = os.path.join(out_dir, "ledger.csv")
    write_ledger_csv(ledger_path, result.ledger)
    log.info("simulated %d frames", plan.n_frames)
    print(qfs_path)
    print(ledger_path)
    return 0


def _cmd_reconstruct(args) -> int:
    estimators = {"covariance": ["covariance"], "shifted": ["shifted"], "both": ["covariance", "shifted"]}[
        args.estimator
    ]
    center = _parse_center(args.center)
    registration, accs = reconstruct_file(args.input, center=center, estimators=estimators)
    out_dir = args.output
    os.makedirs(out_dir, exist_ok=True)
    slope = args.photons_per_count
    outputs = []
    if "covariance" in accs:
        image = finalize_covariance(accs["covariance"], photons_per_count=slope)
        outputs.append(write_image_outputs(out_dir, "covariance", image))
    if "shifted" in accs:
        image = finalize_shifted_product(accs["shifted"], photons_per_count=slope)
        outputs.append(write_image_outputs(out_dir, "shifted_product", image))

    frames, _ = read_qfs(args.input, memmap=True)
    from .estimation import classical_image

    classical = classical_image(frames, args.offset, photons_per_count=slope)
    outputs.append(write_image_outputs(out_dir, "classical", classical))
    cx, cy = registration.center
    print(f"center {cx:.3f},{cy:.3f} confidence "
          f"{registration.confidence if registration.confidence is not None else 'n/a'}")
    for out in outputs:
        print(out["qci"])
    return 0


def _cmd_analyze(args) -> int:
    rows = []
    if args.task == "cnr":
        values = _load_image(args.image)
        if args.roi_object is None or args.roi_background is None:
            raise ValidationError("task cnr needs --roi-object and --roi-background")
        roi1 = _parse_roi_flag(args.roi_object, "object")
        roi2 = _parse_roi_flag(args.roi_background, "background")
        mask = None
        if args.mask:
            from .formats import read_pgm

            mask_values, maxval = read_pgm(args.mask)
            mask = mask_values.astype(float) / maxval
        res = cnr_protocol(
            values, roi1, roi2,
            n_placements=args.placements, jitter_px=args.jitter,
            rng=args.rng_seed, scene_mask=mask,
        )
        rows.append(
            {
                "metric": "cnr",
                "value": res.cnr,
                "sem": res.sem,
                "n": res.n_placements,
                "params": {"image": args.image},
            }
        )
    elif args.task == "esf":
        values = _load_image(args.image)
        profile = edge_profile(values, edge_axis=args.edge_axis)
        fit = fit_esf(profile)
        pitch = args.pixel_pitch
        rows.extend(
            [
                {"metric": "esf_w_px", "value": fit.w, "sem": None, "n": 1,
                 "params": {"converged": fit.converged, "image": args.image}},
                {"metric": "esf_fwhm_um", "value": fit.fwhm * pitch, "sem": None, "n": 1,
                 "params": {"converged": fit.converged, "pixel_pitch_um": pitch}},
                {"metric": "esf_x0_px", "value": fit.x0, "sem": None, "n": 1, "params": {}},
                {"metric": "esf_residual_rms", "value": fit.residual_rms, "sem": None, "n": 1,
                 "params": {}},
            ]
        )
    elif args.task == "mcw":
        frames, _ = read_qfs(args.image, memmap=True)
        res = momentum_corr_width(frames, pixel_pitch_um=args.pixel_pitch)
        rows.extend(
            [
                {"metric": "mcw_sigma_x_um", "value": res.sigma_x_um, "sem": None, "n": 1,
                 "params": {"pixel_pitch_um": args.pixel_pitch}},
                {"metric": "mcw_sigma_y_um", "value": res.sigma_y_um, "sem": None, "n": 1,
                 "params": {"pixel_pitch_um": args.pixel_pitch}},
                {"metric": "mcw_fwhm_x_um", "value": res.fwhm_x_um, "sem": None, "n": 1,
                 "params": {}},
                {"metric": "mcw_fwhm_y_um", "value": res.fwhm_y_um, "sem": None, "n": 1,
                 "params": {}},
            ]
        )
    else:  # pragma: no cover - argparse restricts choices
        raise ValidationError(f"unknown task {args.task!r}")

    if args.output:
        write_metrics_csv(args.output, rows)
        print(args.output)
    else:
        write_metrics_csv("/dev/stdout", rows)
    return 0


def _cmd_sweep_frames(args) -> int:
    cfg = load_config(args.config)
    counts = _parse_list(args.frames, cast=int)
    seeds = _parse_list(args.seeds, cast=int) if args.seeds else None
    if args.seed is not None:
        cfg = _with_seed(cfg, args.seed)
    rows = sweep_frames(cfg, counts, seeds=seeds, workers=args.workers or cfg.workers)
    write_metrics_csv(args.output, rows)
    print(args.output)
    return 0


def _cmd_sweep_stray(args) -> int:
    cfg = load_config(args.config)
    levels = _parse_list(args.stray, cast=float)
    seeds = _parse_list(args.seeds, cast=int) if args.seeds else None
    if args.seed is not None:
        cfg = _with_seed(cfg, args.seed)
    rows = sweep_stray(
        cfg, levels, seeds=seeds, n_frames=args.frames,
        workers=args.workers or cfg.workers,
    )
    write_metrics_csv(args.output, rows)
    print(args.output)
    return 0


def _with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    from dataclasses import replace

    return replace(cfg, seed=seed)


def _cmd_import_fits(args) -> int:
    frames = read_fits(args.input)
    write_qfs(args.output, frames)
    print(args.output)
    return 0


def _cmd_export_fits(args) -> int:
    frames, _ = read_qfs(args.input)
    write_fits(args.output, frames)
    print(args.output)
    return 0


def _cmd_calibrate(args) -> int:
    value = reading_to_photons(args.net_reading, args.photons_per_count)
    print(f"{value:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairscope",
        description="Biphoton coincidence microscopy simulator and reconstruction toolkit",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"pairscope {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a frame stack and its ground-truth ledger")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
    p.add_argument("--output", default=None, help="output directory (default from config)")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("reconstruct", help="reconstruct coincidence images from a QFS stack")
    p.add_argument("--input", required=True)
    p.add_argument("--estimator", choices=["covariance", "shifted", "both"], default="covariance")
    p.add_argument("--center", default="auto", help="'auto' or explicit 'cx,cy'")
    p.add_argument("--offset", type=float, default=467.0, help="camera background offset")
    p.add_argument("--photons-per-count", type=float, default=None,
                   help="calibration slope; converts outputs to photon units")
    p.add_argument("--output", default="out")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("analyze", help="run a metric on an image or stack, emitting CSV")
    p.add_argument("--image", required=True, help=".qci/.pgm image (or .qfs for task mcw)")
    p.add_argument("--task", choices=["cnr", "esf", "mcw"], required=True)
    p.add_argument("--roi-object", default=None)
    p.add_argument("--roi-background", default=None)
    p.add_argument("--placements", type=int, default=10)
    p.add_argument("--jitter", type=int, default=2)
    p.add_argument("--mask", default=None, help="scene mask PGM for placement constraints")
    p.add_argument("--rng-seed", type=int, default=0)
    p.add_argument("--edge-axis", choices=["x", "y"], default="x")
    p.add_argument("--pixel-pitch", type=float, default=1.0)
    p.add_argument("--output", default=None, help="CSV path (stdout when omitted)")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("sweep-frames", help="CNR versus number of frames")
    p.add_argument("--config", required=True)
    p.add_argument("--frames", required=True, help="comma-separated frame counts")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_sweep_frames)

    p = sub.add_parser("sweep-stray", help="CNR versus stray light level")
    p.add_argument("--config", required=True)
    p.add_argument("--stray", required=True, help="comma-separated multiples of the signal mean")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--seeds", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_sweep_stray)

    p = sub.add_parser("import-fits", help="convert a 16-bit FITS stack to QFS")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_import_fits)

    p = sub.add_parser("export-fits", help="convert a QFS stack to 16-bit FITS")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_export_fits)

    p = sub.add_parser("calibrate", help="convert a net camera reading to photons")
    p.add_argument("net_reading", type=float)
    p.add_argument("--photons-per-count", type=float, default=0.037)
    p.set_defaults(func=_cmd_calibrate)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PairscopeError as exc:
        kind = type(exc).__name__.removesuffix("Error").lower() or "error"
        print(f"error[{kind}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("internal error")
        print(f"error[internal]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
