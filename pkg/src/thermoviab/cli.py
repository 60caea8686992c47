"""Pipeline subcommands over case directories.

Exit codes: 0 success, 1 usage, 2 alignment flagged for review, 3 data
error, 4 model error. Failures print one JSON object per line on stderr
so batch drivers can parse them.
"""

import argparse
import dataclasses
import json
import os
import sys

from .errors import ThermoviabError, UsageError
from .phantom import PhantomSpec, generate_study
from .pipeline import (
    RunConfig,
    discover_cases,
    evaluate_dataset,
    run_align,
    run_batch,
    run_features,
    run_predict,
    run_segment,
    train_on_dataset,
)

REVIEW_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(exc: Exception, case_dir: str = None) -> int:
    if isinstance(exc, ThermoviabError):
        code = exc.exit_code
        doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    else:
        code = 3
        doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if case_dir is not None:
        doc["case"] = case_dir
    frame_index = getattr(exc, "frame_index", None)
    if frame_index is not None:
        doc["frame_index"] = frame_index
    family = getattr(exc, "family", None)
    if family is not None:
        doc["family"] = family
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def _print(doc) -> None:
    print(json.dumps(doc, sort_keys=True))


def _resolve_seed(value) -> int:
    if value is not None:
        return value
    env = os.environ.get("THERMOVIAB_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"THERMOVIAB_SEED must be an integer, got {env!r}")


def _parse_ratio(text: str) -> tuple:
    try:
        a, b = text.split(":")
        ratio = (int(a), int(b))
    except ValueError:
        raise UsageError(f"--split must look like 80:20, got {text!r}")
    if ratio[0] <= 0 or ratio[1] <= 0:
        raise UsageError("both split parts must be positive")
    return ratio


def _case_dirs(args) -> list:
    if args.case:
        return [args.case]
    return discover_cases(args.data)


def _run_over_cases(args, fn) -> tuple:
    """(results, exit_code) over --case or --data, honoring --jobs."""
    dirs = _case_dirs(args)
    jobs = getattr(args, "jobs", 1)
    triples = run_batch(dirs, fn, jobs)
    code = 0
    results = []
    for case_dir, result, exc in triples:
        if exc is not None:
            code = max(code, _emit_error(exc, case_dir))
        else:
            results.append((case_dir, result))
    return results, code


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    seed = _resolve_seed(args.seed)
    template = PhantomSpec(
        width=args.width,
        height=args.height,
        disk_radius=args.disk_radius,
        nodule_radius=args.nodule_radius,
        duration=args.duration,
        noise_sigma=args.noise,
        jitter_amp=args.jitter,
    )
    dirs = generate_study(args.out, args.cases, args.viable_frac, seed, template)
    _print({"out": args.out, "cases": len(dirs), "seed": seed})
    return 0


def cmd_align(args) -> int:
    results, code = _run_over_cases(args, lambda d: run_align(d, args.warp))
    review = False
    for case_dir, stab in results:
        rhos = [r.rho for r in stab.frames]
        _print(
            {
                "case": case_dir,
                "frames": len(stab.frames),
                "min_rho": min(rhos),
                "review_required": stab.review_required,
            }
        )
        review = review or stab.review_required
    if code:
        return code
    return REVIEW_EXIT if review else 0


def cmd_segment(args) -> int:
    results, code = _run_over_cases(
        args, lambda d: run_segment(d, args.segmenter, args.model)
    )
    for case_dir, mask in results:
        _print({"case": case_dir, "pixels": mask.count, "segmenter": args.segmenter})
    return code


def cmd_features(args) -> int:
    results, code = _run_over_cases(args, run_features)
    for case_dir, records in results:
        _print(
            {
                "case": case_dir,
                "nodules": len(records),
                "columns": len(records[0].names()) if records else 0,
            }
        )
        if args.out and args.case:
            src = os.path.join(case_dir, "case_features.csv")
            dst = args.out if os.path.isabs(args.out) else os.path.join(case_dir, args.out)
            if os.path.abspath(dst) != os.path.abspath(src):
                with open(src, "rb") as fh:
                    data = fh.read()
                with open(dst, "wb") as fh:
                    fh.write(data)
    return code


def cmd_train(args) -> int:
    seed = _resolve_seed(args.seed)
    cfg = RunConfig(
        data_dir=args.data,
        seed=seed,
        warp_kind=args.warp,
        segmenter=args.segmenter,
        segmenter_model=args.model,
        vote_threshold=args.vote_threshold,
        spec_target=args.spec_target,
        sens_target=args.sens_target,
        jobs=args.jobs,
    )
    result = train_on_dataset(
        args.data,
        args.out,
        ratio=_parse_ratio(args.split),
        seed=seed,
        cfg=cfg,
        group_aware=args.group_aware,
    )
    _print(
        {
            "bundle": args.out,
            "train_cases": len(result.split.train),
            "validation_cases": len(result.split.validation),
            "report": list(result.report_paths),
            "seed": seed,
        }
    )
    return 0


def cmd_predict(args) -> int:
    results, code = _run_over_cases(args, lambda d: run_predict(d, args.model))
    for case_dir, rows in results:
        _print({"case": case_dir, "nodules": rows})
    return code


def cmd_eval(args) -> int:
    cfg = RunConfig(
        data_dir=args.data,
        warp_kind=args.warp,
        segmenter=args.segmenter,
        segmenter_model=args.model_checkpoint,
        jobs=args.jobs,
    )
    doc = evaluate_dataset(args.data, args.model, args.report, cfg=cfg)
    sys.stdout.write(doc.to_markdown())
    return 0


def cmd_serve(args) -> int:
    from .gateway import create_app
    import uvicorn

    app = create_app(args.data, args.model, frontend_dist=args.frontend)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_case_or_data(p: _Parser) -> None:
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--case", help="one case directory")
    group.add_argument("--data", help="dataset root; runs every case under it")
    p.add_argument("--jobs", type=int, default=1, help="parallel cases with --data")


def build_parser() -> _Parser:
    parser = _Parser(prog="thermoviab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic labelled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=8)
    p.add_argument("--viable-frac", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--disk-radius", type=float, default=60.0)
    p.add_argument("--nodule-radius", type=float, default=8.0)
    p.add_argument("--duration", type=float, default=120.0)
    p.add_argument("--noise", type=float, default=0.04)
    p.add_argument("--jitter", type=float, default=2.0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("align", help="stabilize a case's frames to frame 0")
    _add_case_or_data(p)
    p.add_argument("--warp", choices=["translation", "euclidean", "affine"], default="euclidean")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("segment", help="extract the cooled-region mask")
    _add_case_or_data(p)
    p.add_argument("--segmenter", choices=["otsu", "net", "manual"], default="otsu")
    p.add_argument("--model", default=None, help="checkpoint for --segmenter net")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("features", help="extract the five feature families")
    _add_case_or_data(p)
    p.add_argument("--out", default=None, help="extra copy of the combined CSV (single case)")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="fit the five voters and the ensemble")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="80:20")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="bundle directory to write")
    p.add_argument("--warp", choices=["translation", "euclidean", "affine"], default="euclidean")
    p.add_argument("--segmenter", choices=["otsu", "net", "manual"], default="otsu")
    p.add_argument("--model", default=None, help="checkpoint for --segmenter net")
    p.add_argument("--vote-threshold", type=int, default=2)
    p.add_argument("--spec-target", type=float, default=0.95)
    p.add_argument("--sens-target", type=float, default=0.60)
    p.add_argument("--group-aware", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="classify nodules with a trained bundle")
    _add_case_or_data(p)
    p.add_argument("--model", required=True, help="bundle directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a labelled dataset and write the study table")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="bundle directory")
    p.add_argument("--report", required=True, help="report path (.json; .md written beside)")
    p.add_argument("--warp", choices=["translation", "euclidean", "affine"], default="euclidean")
    p.add_argument("--segmenter", choices=["otsu", "net", "manual"], default="otsu")
    p.add_argument("--model-checkpoint", default=None, help="checkpoint for --segmenter net")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the review gateway")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None, help="bundle directory")
    p.add_argument("--frontend", default=None, help="built UI directory (default frontend/dist)")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ThermoviabError as exc:
        return _emit_error(exc)
