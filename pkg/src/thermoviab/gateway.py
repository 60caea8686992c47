"""HTTP facade over the case pipeline for the review tool.

Endpoints live under ``/api``; a built review UI, when present, is served
statically at ``/``. Stage runs execute off the request path in a small
thread pool with at most one job per case at a time; clients poll
``/api/jobs/{id}``. Frame renders use a fixed iron palette with a per-case
temperature window (min/max of the precool frame) so frames stay visually
comparable over time; the window rides along in the ``X-Temperature-Min``
and ``X-Temperature-Max`` headers.

Error mapping: 404 unknown case or job, 409 stage-order violation or a
concurrent run on the same case, 422 invalid annotation payload.
"""

import io
import itertools
import os
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .errors import (
    DegeneratePolygon,
    EmptyDataset,
    InvalidAnnotation,
    InvalidSpec,
    MissingAnnotation,
    StageOrderError,
    ThermoviabError,
)
from .features import extract_region_series
from .io import read_case, read_manifest, read_mask_pgm
from .pipeline import (
    STAGES,
    build_aligned_case,
    case_status,
    discover_cases,
    read_outcome,
    replace_annotations,
    require_stages,
    run_align,
    run_features,
    run_predict,
    run_segment,
    stage_status,
)
from .registration import read_warps, resample

# classic iron thermal palette; linear ramps between the anchor colors
IRON_ANCHORS = (
    (0.00, (0, 0, 0)),
    (0.06, (20, 11, 52)),
    (0.25, (132, 10, 104)),
    (0.50, (229, 80, 0)),
    (0.75, (255, 166, 0)),
    (1.00, (255, 255, 255)),
)


def _build_lut() -> np.ndarray:
    pos = np.array([p for p, _ in IRON_ANCHORS])
    lut = np.empty((256, 3), dtype=np.uint8)
    grid = np.arange(256) / 255.0
    for c in range(3):
        vals = np.array([rgb[c] for _, rgb in IRON_ANCHORS], dtype=np.float64)
        lut[:, c] = np.round(np.interp(grid, pos, vals)).astype(np.uint8)
    return lut


IRON_LUT = _build_lut()


def render_png(values, vmin: float, vmax: float) -> bytes:
    """Map temperatures onto the iron palette over [vmin, vmax] and encode
    as PNG. Values outside the window clip to the palette ends."""
    arr = np.asarray(values, dtype=np.float64)
    if vmax > vmin:
        norm = np.clip((arr - vmin) / (vmax - vmin), 0.0, 1.0)
    else:
        norm = np.zeros(arr.shape)
    idx = np.round(norm * 255).astype(np.uint8)
    img = Image.fromarray(IRON_LUT[idx], mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


class _Gateway:
    """Shared state behind the endpoints: data root, model, job table."""

    def __init__(self, data_root: str, bundle_dir=None, jobs: int = 2):
        self.data_root = data_root
        self.bundle_dir = bundle_dir
        self.lock = threading.Lock()
        self.jobs = {}
        self.running = {}  # case_id -> job_id while queued or running
        self.pool = ThreadPoolExecutor(max_workers=jobs)
        self._counter = itertools.count(1)

    def case_dir(self, case_id: str) -> str:
        try:
            dirs = discover_cases(self.data_root)
        except EmptyDataset:
            dirs = []
        for d in dirs:
            if os.path.basename(d) == case_id:
                return d
        for d in dirs:
            if read_manifest(d)["case_id"] == case_id:
                return d
        raise HTTPException(status_code=404, detail=f"unknown case {case_id!r}")

    def busy(self, case_id: str) -> bool:
        job_id = self.running.get(case_id)
        return job_id is not None and self.jobs[job_id]["status"] in ("queued", "running")

    def submit(self, case_id: str, case_dir: str, stage: str, options: dict) -> dict:
        with self.lock:
            if self.busy(case_id):
                raise HTTPException(
                    status_code=409,
                    detail=f"a {self.jobs[self.running[case_id]]['stage']} job is already running on {case_id}",
                )
            require_stages(case_dir, stage)
            if stage == "predict" and not self.bundle_dir:
                raise HTTPException(status_code=409, detail="no model bundle loaded")
            job_id = f"job-{next(self._counter)}"
            job = {
                "job": job_id,
                "case_id": case_id,
                "stage": stage,
                "status": "queued",
                "result": None,
                "error": None,
            }
            self.jobs[job_id] = job
            self.running[case_id] = job_id
        self.pool.submit(self._run, job_id, case_dir, stage, options)
        return job

    def _run(self, job_id: str, case_dir: str, stage: str, options: dict) -> None:
        job = self.jobs[job_id]
        with self.lock:
            job["status"] = "running"
        try:
            result = self._execute(case_dir, stage, options)
            with self.lock:
                job["status"] = "done"
                job["result"] = result
        except Exception as exc:
            with self.lock:
                job["status"] = "failed"
                job["error"] = {"error": type(exc).__name__, "message": str(exc)}
        finally:
            with self.lock:
                if self.running.get(job["case_id"]) == job_id:
                    del self.running[job["case_id"]]

    def _execute(self, case_dir: str, stage: str, options: dict) -> dict:
        if stage == "align":
            stab = run_align(case_dir, options.get("warp", "euclidean"))
            return {
                "review_required": stab.review_required,
                "min_rho": min(r.rho for r in stab.frames),
            }
        if stage == "segment":
            mask = run_segment(
                case_dir, options.get("segmenter", "otsu"), options.get("model")
            )
            return {"pixels": mask.count}
        if stage == "features":
            records = run_features(case_dir)
            return {"nodules": len(records)}
        rows = run_predict(case_dir, self.bundle_dir)
        return {"nodules": rows}


def _nearest_index(timestamps, t: float) -> int:
    """Nearest acquisition time; ties break toward the earlier frame."""
    ts = np.asarray(timestamps, dtype=np.float64)
    return int(np.argmin(np.abs(ts - t)))


def create_app(data_root: str, bundle_dir=None, frontend_dist=None, jobs: int = 2) -> FastAPI:
    gw = _Gateway(data_root, bundle_dir, jobs=jobs)
    app = FastAPI(title="thermoviab gateway")

    @app.exception_handler(ThermoviabError)
    def _domain_error(request, exc):
        if isinstance(exc, StageOrderError):
            code = 409
        elif isinstance(
            exc, (InvalidAnnotation, DegeneratePolygon, MissingAnnotation, InvalidSpec)
        ):
            code = 422
        else:
            code = 500
        return JSONResponse(
            status_code=code,
            content={"error": type(exc).__name__, "message": str(exc)},
        )

    @app.get("/api/cases")
    def list_cases():
        try:
            dirs = discover_cases(gw.data_root)
        except EmptyDataset:
            return []
        rows = []
        for d in dirs:
            row = case_status(d)
            if row["label"] == "unknown":
                row["label"] = None
            rows.append(row)
        return rows

    @app.get("/api/cases/{case_id}")
    def case_detail(case_id: str):
        d = gw.case_dir(case_id)
        manifest = read_manifest(d)
        row = case_status(d)
        artifacts = {
            "warps": os.path.exists(os.path.join(d, "warps.jsonl")),
            "roi": os.path.exists(os.path.join(d, "roi.pgm")),
            "features": os.path.exists(os.path.join(d, "case_features.csv")),
            "outcome": os.path.exists(os.path.join(d, "outcome.json")),
        }
        return {
            "case_id": manifest["case_id"],
            "participant_id": manifest.get("participant_id"),
            "label": manifest.get("label"),
            "status": row["status"],
            "review_required": row["review_required"],
            "busy": gw.busy(case_id),
            "width": manifest["width"],
            "height": manifest["height"],
            "nominal_rate_hz": manifest["nominal_rate_hz"],
            "frame_times": [f["t_seconds"] for f in manifest["frames"]],
            "provenance": manifest.get("provenance"),
            "annotations": manifest.get("annotations", []),
            "artifacts": artifacts,
        }

    @app.get("/api/cases/{case_id}/frames/{t}.png")
    def frame_png(case_id: str, t: str):
        d = gw.case_dir(case_id)
        try:
            when = float(t)
        except ValueError:
            raise HTTPException(status_code=404, detail=f"bad frame time {t!r}")
        _, sequence = read_case(d)
        pre = np.asarray(sequence.precool.temps, dtype=np.float64)
        vmin, vmax = float(pre.min()), float(pre.max())
        frames = [sequence.precool] + list(sequence.frames)
        frame = frames[_nearest_index([f.timestamp for f in frames], when)]
        data = render_png(np.asarray(frame.temps, dtype=np.float64), vmin, vmax)
        headers = {
            "X-Temperature-Min": repr(vmin),
            "X-Temperature-Max": repr(vmax),
            "X-Frame-Seconds": repr(float(frame.timestamp)),
        }
        return Response(content=data, media_type="image/png", headers=headers)

    @app.get("/api/cases/{case_id}/curves")
    def curves(case_id: str):
        d = gw.case_dir(case_id)
        require_stages(d, "features")
        record, sequence = read_case(d)
        stab = read_warps(os.path.join(d, "warps.jsonl"))
        mask = read_mask_pgm(os.path.join(d, "roi.pgm"))
        aligned = build_aligned_case(record, sequence, stab, mask)
        nodules = []
        for nod in aligned.nodules:
            series = extract_region_series(aligned, nod.point)
            nodules.append(
                {
                    "nodule_id": nod.nodule_id,
                    "series": [
                        {
                            "region": s.region,
                            "signal": s.signal,
                            "samples": s.samples.tolist(),
                        }
                        for s in series
                    ],
                }
            )
        length = len(nodules[0]["series"][0]["samples"]) if nodules else 0
        return {"times": list(range(length)), "nodules": nodules}

    @app.put("/api/cases/{case_id}/annotations")
    def put_annotations(case_id: str, body: dict):
        d = gw.case_dir(case_id)
        with gw.lock:
            if gw.busy(case_id):
                raise HTTPException(
                    status_code=409, detail=f"a job is running on {case_id}"
                )
        annotations = body.get("annotations")
        if not isinstance(annotations, list):
            raise InvalidAnnotation("body must carry an 'annotations' list")
        try:
            replace_annotations(d, annotations)
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise InvalidAnnotation(f"bad annotation payload: {exc}")
        manifest = read_manifest(d)
        return {
            "case_id": case_id,
            "annotations": manifest["annotations"],
            "status": stage_status(d),
        }

    @app.post("/api/cases/{case_id}/run", status_code=202)
    def run_stage(case_id: str, body: dict):
        d = gw.case_dir(case_id)
        stage = body.get("stage")
        if stage not in STAGES:
            raise InvalidSpec(f"stage must be one of {STAGES}, got {stage!r}")
        job = gw.submit(case_id, d, stage, body)
        return dict(job)

    @app.get("/api/jobs/{job_id}")
    def job_detail(job_id: str):
        with gw.lock:
            job = gw.jobs.get(job_id)
            if job is None:
                raise HTTPException(status_code=404, detail=f"unknown job {job_id!r}")
            return dict(job)

    @app.get("/api/cases/{case_id}/result")
    def result(case_id: str):
        d = gw.case_dir(case_id)
        return read_outcome(d)

    @app.get("/api/cases/{case_id}/registration")
    def registration(case_id: str):
        d = gw.case_dir(case_id)
        require_stages(d, "segment")  # warps.jsonl is the align artifact
        stab = read_warps(os.path.join(d, "warps.jsonl"))
        frames = [
            {
                "frame_index": i,
                "rho": r.rho,
                "iterations": r.iterations,
                "converged": r.converged,
                "before": f"/api/cases/{case_id}/registration/{i}/before.png",
                "after": f"/api/cases/{case_id}/registration/{i}/after.png",
            }
            for i, r in enumerate(stab.frames)
        ]
        return {
            "review_required": stab.review_required,
            "precool": {
                "rho": stab.precool.rho,
                "iterations": stab.precool.iterations,
                "converged": stab.precool.converged,
            },
            "frames": frames,
        }

    @app.get("/api/cases/{case_id}/registration/{index}/{when}.png")
    def registration_diff(case_id: str, index: int, when: str):
        if when not in ("before", "after"):
            raise HTTPException(status_code=404, detail=f"unknown render {when!r}")
        d = gw.case_dir(case_id)
        require_stages(d, "segment")
        _, sequence = read_case(d)
        stab = read_warps(os.path.join(d, "warps.jsonl"))
        if not 0 <= index < len(sequence.frames):
            raise HTTPException(status_code=404, detail=f"no frame {index}")
        base = np.asarray(sequence.frames[0].temps, dtype=np.float64)
        raw = np.asarray(sequence.frames[index].temps, dtype=np.float64)
        before = np.abs(raw - base)
        if when == "before":
            diff = before
        else:
            moved, valid = resample(sequence.frames[index], stab.frames[index].warp)
            diff = np.where(valid, np.abs(moved - base), 0.0)
        # one window for both renders so before/after are comparable
        vmax = max(float(before.max()), 1e-6)
        data = render_png(diff, 0.0, vmax)
        headers = {
            "X-Temperature-Min": repr(0.0),
            "X-Temperature-Max": repr(vmax),
        }
        return Response(content=data, media_type="image/png", headers=headers)

    if frontend_dist is None:
        frontend_dist = os.path.join("frontend", "dist")
    if os.path.isdir(frontend_dist):
        app.mount("/", StaticFiles(directory=frontend_dist, html=True), name="ui")

    return app
