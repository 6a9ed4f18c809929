"""Command-line front end.

Subcommands: ``register``, ``estimate-mask``, ``pipeline``, ``synth``,
``warp`` and ``metrics``.  Inputs are given either one by one
(``--moving``, ``--fixed``, ...) or as a phantom case directory
(``--case``).  Outputs go under ``--out`` with fixed names.

Exit codes: 0 success, 2 usage error, 3 validation or IO error,
4 numerical failure.  Failures print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import full_report
from .registration import NumericalError, register
from .stage1 import estimate_soft_mask
from .synth import SCENARIOS, PhantomCase, generate_phantom
from .volume import (BinaryMask, DisplacementField, GridInfo, RegistrationConfig,
                     ScalarVolume, SoftMask, VolumeError, ensure_dir, parse_transform,
                     read_landmarks, read_volume, write_volume)
from .warp import warp_mask, warp_scalar

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3, 4

STM_FILE = "stm.vpv.json"
FIELD1_FILE = "field_stage1.vpv.json"
FIELD2_FILE = "field_stage2.vpv.json"
WARPED_FILE = "warped.vpv.json"
REPORT_FILE = "report.json"
REGULAR_REPORT_FILE = "report_regular.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# inputs


@dataclass
class Inputs:
    moving: ScalarVolume
    fixed: ScalarVolume
    organ_moving: BinaryMask | None = None
    organ_fixed: BinaryMask | None = None
    tumor_moving: BinaryMask | None = None
    landmarks: object = None
    name: str = "case"


def _load_inputs(args, case=None) -> Inputs:
    if case is not None:
        c = PhantomCase.load(case)
        return Inputs(c.moving, c.fixed, c.organ_moving, c.organ_fixed, c.tumor_moving,
                      c.landmarks, Path(case).name)
    if not args.moving or not args.fixed:
        raise UsageError("give --case or both --moving and --fixed")
    inp = Inputs(read_volume(args.moving, "scalar"), read_volume(args.fixed, "scalar"))
    if getattr(args, "organ", None):
        inp.organ_moving = read_volume(args.organ, "binary_mask")
    if getattr(args, "organ_fixed", None):
        inp.organ_fixed = read_volume(args.organ_fixed, "binary_mask")
    if getattr(args, "tumor", None):
        inp.tumor_moving = read_volume(args.tumor, "binary_mask")
    if getattr(args, "landmarks", None):
        inp.landmarks = read_landmarks(args.landmarks, inp.fixed.grid)
    return inp


def _config(args) -> RegistrationConfig:
    d = RegistrationConfig().to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise VolumeError(f"missing file: {path}")
        try:
            d.update(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise VolumeError(f"config is not valid JSON: {exc}") from None
    for key in ("alpha_vp", "alpha_reg", "step_size", "pyramid_levels", "transform", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            d[key] = value
    if getattr(args, "iterations", None):
        d["iterations_per_level"] = args.iterations
    elif getattr(args, "pyramid_levels", None) is not None:
        # a level count given alone keeps the finest part of the default schedule
        d["iterations_per_level"] = RegistrationConfig().iterations_per_level[-args.pyramid_levels:]
    d["iterations_per_level"] = tuple(d["iterations_per_level"])
    return RegistrationConfig.from_dict(d)


def _report(inp: Inputs, field: DisplacementField, config: RegistrationConfig, extra=None):
    if inp.organ_moving is None or inp.organ_fixed is None or inp.tumor_moving is None:
        return None
    cfg = config.to_dict()
    if extra:
        cfg.update(extra)
    return full_report(field, inp.organ_moving, inp.organ_fixed, inp.tumor_moving, inp.landmarks, cfg)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _stm_summary(stm: SoftMask, organ: BinaryMask) -> dict:
    inside = organ.as_bool()
    return {
        "mean_stm_in_organ": float(stm.data[inside].mean()) if inside.any() else 0.0,
        "mean_stm_outside_organ": float(stm.data[~inside].mean()) if (~inside).any() else 0.0,
    }


# ---------------------------------------------------------------------------
# commands


def _stm_from_source(source: str, inp: Inputs, config, args, out: Path):
    if source == "none":
        return None
    if source == "organ":
        if inp.organ_fixed is None:
            raise UsageError("--mask-source organ needs a fixed organ mask (--organ-fixed or --case)")
        return SoftMask.from_binary(inp.organ_fixed)
    if source == "estimated":
        if inp.organ_moving is None:
            raise UsageError("--mask-source estimated needs --organ")
        est = estimate_soft_mask(inp.moving, inp.fixed, inp.organ_moving, config,
                                 skip_prereg=getattr(args, "skip_prereg", False))
        write_volume(est.stm, out / STM_FILE)
        write_volume(est.prereg_field, out / FIELD1_FILE)
        return est.stm
    if source.startswith("file:"):
        obj = read_volume(source[len("file:"):])
        if isinstance(obj, (BinaryMask, ScalarVolume)):
            obj = SoftMask(obj.grid, np.asarray(obj.data, dtype=np.float64))
        if not isinstance(obj, SoftMask):
            raise VolumeError("mask file must hold a scalar or mask volume")
        return obj
    raise UsageError(f"unknown --mask-source {source!r}")


def _run_register(args, case=None) -> int:
    vp = args.vp == "on"
    source = args.mask_source
    if vp and source == "none":
        raise UsageError("--vp on needs a mask source other than none")
    config = _config(args)
    inp = _load_inputs(args, case)
    out = _out_dir(args, inp, case)
    if source != "none" and inp.organ_moving is None:
        raise UsageError("mask-based registration needs --organ")
    stm = _stm_from_source(source, inp, config, args, out)
    run_config = config if vp else config.replace(alpha_vp=0.0)
    result = register(inp.moving, inp.fixed, inp.organ_moving, stm, run_config)
    write_volume(result.field, out / (FIELD2_FILE if stm is not None else FIELD1_FILE))
    write_volume(warp_scalar(inp.moving, result.field), out / WARPED_FILE)
    rep = _report(inp, result.field, run_config, {"vp": args.vp, "mask_source": source})
    if rep is not None:
        (out / REPORT_FILE).write_text(rep.to_json())
    return EXIT_OK


def _run_estimate(args, case=None) -> int:
    config = _config(args)
    inp = _load_inputs(args, case)
    if inp.organ_moving is None:
        raise UsageError("estimate-mask needs --organ")
    out = _out_dir(args, inp, case)
    est = estimate_soft_mask(inp.moving, inp.fixed, inp.organ_moving, config, skip_prereg=args.skip_prereg)
    write_volume(est.stm, out / STM_FILE)
    write_volume(est.prereg_field, out / FIELD1_FILE)
    summary = _stm_summary(est.stm, est.organ_prereg)
    summary.update({"organ_ratio": est.organ_ratio, "skip_prereg": bool(args.skip_prereg),
                    "config": config.to_dict(), "version": __version__})
    _write_json(out / REPORT_FILE, summary)
    return EXIT_OK


def _run_pipeline(args, case=None) -> int:
    config = _config(args)
    inp = _load_inputs(args, case)
    if inp.organ_moving is None:
        raise UsageError("pipeline needs --organ")
    out = _out_dir(args, inp, case)
    est = estimate_soft_mask(inp.moving, inp.fixed, inp.organ_moving, config, skip_prereg=args.skip_prereg)
    write_volume(est.stm, out / STM_FILE)
    write_volume(est.prereg_field, out / FIELD1_FILE)
    result = register(inp.moving, inp.fixed, inp.organ_moving, est.stm, config)
    write_volume(result.field, out / FIELD2_FILE)
    write_volume(warp_scalar(inp.moving, result.field), out / WARPED_FILE)
    regular = None
    if args.compare_regular:
        reg_config = config.replace(alpha_vp=0.0)
        regular = register(inp.moving, inp.fixed, inp.organ_moving, None, reg_config)
    rep = _report(inp, result.field, config, {"mode": "two_stage"})
    if rep is not None:
        (out / REPORT_FILE).write_text(rep.to_json())
    if regular is not None:
        rep_r = _report(inp, regular.field, config.replace(alpha_vp=0.0), {"mode": "regular"})
        if rep_r is not None:
            (out / REGULAR_REPORT_FILE).write_text(rep_r.to_json())
            _print_side_by_side(rep_r.to_dict(), rep.to_dict())
    return EXIT_OK


def _print_side_by_side(regular: dict, two_stage: dict):
    print(f"{'metric':<22}{'regular':>14}{'two_stage':>14}")
    for key in ("dice_organ", "landmark_distance_mm", "folding_pct", "jacobian_std",
                "tsr_moving", "tsr_warped", "stsr"):
        a, b = regular.get(key), two_stage.get(key)
        fa = "-" if a is None else f"{a:.4g}"
        fb = "-" if b is None else f"{b:.4g}"
        print(f"{key:<22}{fa:>14}{fb:>14}")


def _cmd_synth(args) -> int:
    dims = tuple(args.dims) if len(args.dims) == 3 else (args.dims[0],) * 3
    case = generate_phantom(args.scenario, GridInfo(dims), seed=args.seed, rim_amplitude=args.rim)
    case.save(args.out)
    return EXIT_OK


def _cmd_warp(args) -> int:
    field = read_volume(args.field, kind="field")
    obj = read_volume(args.input)
    if isinstance(obj, BinaryMask):
        warped = warp_mask(obj, field)
    elif isinstance(obj, ScalarVolume):
        warped = warp_scalar(obj, field)
    else:
        raise VolumeError("warp input must be a scalar volume or binary mask")
    out = ensure_dir(args.out)
    write_volume(warped, out / WARPED_FILE)
    return EXIT_OK


def _cmd_metrics(args) -> int:
    field = read_volume(args.field, kind="field")
    if args.case:
        c = PhantomCase.load(args.case)
        organ_m, organ_f, tumor, lms = c.organ_moving, c.organ_fixed, c.tumor_moving, c.landmarks
    else:
        if not (args.organ and args.organ_fixed and args.tumor):
            raise UsageError("metrics needs --case or --organ, --organ-fixed and --tumor")
        organ_m = read_volume(args.organ, kind="binary_mask")
        organ_f = read_volume(args.organ_fixed, kind="binary_mask")
        tumor = read_volume(args.tumor, kind="binary_mask")
        lms = read_landmarks(args.landmarks, field.grid) if args.landmarks else None
    rep = full_report(field, organ_m, organ_f, tumor, lms)
    out = ensure_dir(args.out)
    (out / REPORT_FILE).write_text(rep.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# fan-out over cases


def _out_dir(args, inp: Inputs, case) -> Path:
    root = Path(args.out)
    if case is not None and len(args.case or []) > 1:
        return ensure_dir(root / inp.name)
    return ensure_dir(root)


def _one_case(job):
    runner, args, case = job
    try:
        return _guarded(runner, args, case)
    except Exception as exc:  # pragma: no cover - reported to the parent
        return _failure(EXIT_VALIDATION, "validation", str(exc))


def _fan_out(runner, args) -> int:
    cases = args.case or [None]
    if len(cases) == 1:
        return runner(args, cases[0])
    jobs = [(runner, args, c) for c in cases]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(_one_case, jobs))
    else:
        codes = [_one_case(j) for j in jobs]
    return max(codes)


_RUNNERS = {"register": _run_register, "estimate-mask": _run_estimate, "pipeline": _run_pipeline}


# ---------------------------------------------------------------------------
# parser and entry point


def _add_inputs(p, organ=True, eval_masks=True):
    p.add_argument("--case", nargs="+", help="phantom case directory (several allowed)")
    p.add_argument("--moving", help="moving image (.vpv.json)")
    p.add_argument("--fixed", help="fixed image (.vpv.json)")
    if organ:
        p.add_argument("--organ", help="moving-image organ mask")
    if eval_masks:
        p.add_argument("--organ-fixed", help="fixed-image organ mask, for the report")
        p.add_argument("--tumor", help="moving-image tumour mask, for the report")
        p.add_argument("--landmarks", help="landmark CSV, for the report")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel cases when several --case are given")


def _add_config(p):
    p.add_argument("--config", help="JSON file with RegistrationConfig keys")
    p.add_argument("--alpha-vp", dest="alpha_vp", type=float)
    p.add_argument("--alpha-reg", dest="alpha_reg", type=float)
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--pyramid-levels", dest="pyramid_levels", type=int)
    p.add_argument("--iterations", type=int, nargs="+", help="iterations per level, coarsest first")
    p.add_argument("--transform", type=_transform_arg, help="sigmoid | sin | hard:<t>")
    p.add_argument("--seed", type=int)


def _transform_arg(value):
    try:
        parse_transform(value)
    except VolumeError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="volreg", description="Tumour volume-preserving registration of 3D volumes.")
    parser.add_argument("--version", action="version", version=f"volreg {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("register", help="single registration (Regular, weighted-similarity or VP)")
    _add_inputs(p)
    _add_config(p)
    p.add_argument("--vp", choices=("on", "off"), default="off")
    p.add_argument("--mask-source", default="none",
                   help="none | file:<path> | organ | estimated")
    p.add_argument("--skip-prereg", action="store_true", help="with --mask-source estimated")

    p = sub.add_parser("estimate-mask", help="soft tumour mask from volume-change analysis")
    _add_inputs(p, eval_masks=False)
    _add_config(p)
    p.add_argument("--skip-prereg", action="store_true", help="omit the edge-alignment pass")

    p = sub.add_parser("pipeline", help="mask estimation followed by volume-preserving registration")
    _add_inputs(p)
    _add_config(p)
    p.add_argument("--skip-prereg", action="store_true")
    p.add_argument("--compare-regular", action="store_true", help="also run Regular mode and report both")

    p = sub.add_parser("synth", help="write a phantom case directory")
    p.add_argument("scenario", choices=SCENARIOS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, nargs="+", default=[64])
    p.add_argument("--rim", type=float, default=0.0, help="boundary-mismatch amplitude (voxels)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("warp", help="warp a volume or mask through a field")
    p.add_argument("--input", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("metrics", help="metrics report for a field")
    p.add_argument("--field", required=True)
    p.add_argument("--case")
    p.add_argument("--organ")
    p.add_argument("--organ-fixed")
    p.add_argument("--tumor")
    p.add_argument("--landmarks")
    p.add_argument("--out", required=True)
    return parser


def _failure(code: int, kind: str, message: str) -> int:
    line = json.dumps({"error": kind, "code": code, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def _guarded(fn, *a) -> int:
    try:
        return fn(*a)
    except UsageError as exc:
        return _failure(EXIT_USAGE, "usage", str(exc))
    except NumericalError as exc:
        return _failure(EXIT_NUMERICAL, "numerical", str(exc))
    except (VolumeError, OSError, ValueError, KeyError) as exc:
        return _failure(EXIT_VALIDATION, "validation", str(exc))


def _dispatch(args) -> int:
    if args.command in _RUNNERS:
        if args.case is None and args.jobs != 1:
            raise UsageError("--jobs needs several --case directories")
        return _fan_out(_RUNNERS[args.command], args)
    return {"synth": _cmd_synth, "warp": _cmd_warp, "metrics": _cmd_metrics}[args.command](args)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _failure(EXIT_USAGE, "usage", str(exc))
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    return _guarded(_dispatch, args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
