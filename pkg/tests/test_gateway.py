"""HTTP contract tests for the review gateway.

The app is exercised through fastapi's TestClient; stage jobs really run
on the thread pool, so job tests poll like a browser would.
"""

import io
import os
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from thermoviab import gateway
from thermoviab import pipeline
from thermoviab.gateway import create_app
from thermoviab.io import rasterize_polygon, read_case, read_manifest
from thermoviab.phantom import PhantomSpec, generate_study, write_phantom_case
from thermoviab.pipeline import train_on_dataset, RunConfig
from thermoviab.registration import read_warps, transport_polygon


def small_template(jitter: float = 0.5) -> PhantomSpec:
    return PhantomSpec(
        width=96,
        height=72,
        disk_radius=20.0,
        nodule_radius=5.0,
        duration=6.0,
        noise_sigma=0.02,
        jitter_amp=jitter,
    )


def wait_job(client, job_id: str, timeout: float = 60.0) -> dict:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        doc = client.get(f"/api/jobs/{job_id}").json()
        if doc["status"] in ("done", "failed"):
            return doc
        time.sleep(0.01)
    raise AssertionError(f"job {job_id} did not finish within {timeout}s")


@pytest.fixture(scope="module")
def study_a(tmp_path_factory):
    """Eight cases taken all the way through training; fully featured."""
    root = str(tmp_path_factory.mktemp("gw_a") / "study")
    generate_study(root, 8, seed=13, template=small_template())
    return root


@pytest.fixture(scope="module")
def bundle(study_a, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("gw_bundle") / "model")
    train_on_dataset(study_a, out, seed=3, cfg=RunConfig(data_dir=study_a, seed=3, jobs=2))
    return out


@pytest.fixture(scope="module")
def client(study_a, bundle):
    return TestClient(create_app(study_a, bundle))


@pytest.fixture(scope="module")
def study_b(tmp_path_factory):
    """Four raw cases for driving stages through the jobs API."""
    root = str(tmp_path_factory.mktemp("gw_b") / "study")
    generate_study(root, 4, seed=29, template=small_template())
    return root


@pytest.fixture(scope="module")
def client_b(study_b):
    # no model bundle on purpose
    return TestClient(create_app(study_b))


def case_ids(root) -> list:
    return [os.path.basename(d) for d in pipeline.discover_cases(root)]


class TestListing:
    def test_lists_every_case(self, client, study_a):
        rows = client.get("/api/cases").json()
        assert [r["case_id"] for r in rows] == case_ids(study_a)
        for row in rows:
            assert row["label"] in ("viable", "nonviable")
            assert row["status"] == "featured"
            assert row["review_required"] is False

    def test_raw_listing_status(self, client_b):
        rows = client_b.get("/api/cases").json()
        assert {r["status"] for r in rows} == {"raw"}

    def test_case_detail(self, client, study_a):
        cid = case_ids(study_a)[0]
        doc = client.get(f"/api/cases/{cid}").json()
        assert doc["case_id"] == cid
        assert doc["width"] == 96 and doc["height"] == 72
        assert len(doc["frame_times"]) == 7  # precool + video frames t=0..5
        assert doc["frame_times"][0] == -5.0
        assert doc["artifacts"] == {
            "warps": True, "roi": True, "features": True, "outcome": False,
        }
        (ann,) = doc["annotations"]
        assert set(ann) == {"nodule_id", "point", "polygon"}

    def test_unknown_case_404(self, client):
        resp = client.get("/api/cases/nope")
        assert resp.status_code == 404

    def test_empty_dataset_lists_nothing(self, tmp_path):
        app = create_app(str(tmp_path))
        assert TestClient(app).get("/api/cases").json() == []


class TestJobs:
    def test_stage_order_violation_409(self, client_b, study_b):
        cid = case_ids(study_b)[0]
        resp = client_b.post(f"/api/cases/{cid}/run", json={"stage": "segment"})
        assert resp.status_code == 409
        doc = resp.json()
        assert doc["error"] == "StageOrderError"
        assert "alignment missing" in doc["message"]

    def test_unknown_stage_422(self, client_b, study_b):
        cid = case_ids(study_b)[0]
        resp = client_b.post(f"/api/cases/{cid}/run", json={"stage": "bogus"})
        assert resp.status_code == 422

    def test_align_job_on_jittered_case(self, client_b, study_b):
        cid = case_ids(study_b)[1]
        resp = client_b.post(f"/api/cases/{cid}/run", json={"stage": "align"})
        assert resp.status_code == 202
        job = resp.json()
        assert job["status"] in ("queued", "running")
        done = wait_job(client_b, job["job"])
        assert done["status"] == "done", done["error"]
        assert done["result"]["review_required"] is False
        assert done["result"]["min_rho"] > 0.9
        reg = client_b.get(f"/api/cases/{cid}/registration").json()
        assert all(f["rho"] > 0.9 for f in reg["frames"])

    def test_unknown_job_404(self, client_b):
        assert client_b.get("/api/jobs/job-999999").status_code == 404

    def test_predict_without_model_409(self, client_b, study_b):
        d = pipeline.discover_cases(study_b)[2]
        pipeline.run_align(d)
        pipeline.run_segment(d)
        pipeline.run_features(d)
        cid = os.path.basename(d)
        resp = client_b.post(f"/api/cases/{cid}/run", json={"stage": "predict"})
        assert resp.status_code == 409
        assert "no model bundle" in resp.json()["detail"]

    def test_concurrent_job_and_edit_rejected(self, client_b, study_b, monkeypatch):
        d = pipeline.discover_cases(study_b)[3]
        pipeline.run_align(d)
        pipeline.run_segment(d)
        cid = os.path.basename(d)
        release = threading.Event()
        started = threading.Event()

        def blocked(case_dir):
            started.set()
            release.wait(30)
            return []

        monkeypatch.setattr(gateway, "run_features", blocked)
        try:
            job = client_b.post(
                f"/api/cases/{cid}/run", json={"stage": "features"}
            ).json()
            assert started.wait(10)
            second = client_b.post(f"/api/cases/{cid}/run", json={"stage": "segment"})
            assert second.status_code == 409
            assert "already running" in second.json()["detail"]
            edit = client_b.put(
                f"/api/cases/{cid}/annotations",
                json={"annotations": [{"nodule_id": "n1", "point": [40, 30]}]},
            )
            assert edit.status_code == 409
        finally:
            release.set()
        assert wait_job(client_b, job["job"])["status"] == "done"

    def test_failed_job_records_error(self, client_b, study_b):
        cid = case_ids(study_b)[3]
        job = client_b.post(
            f"/api/cases/{cid}/run", json={"stage": "segment", "segmenter": "net"}
        ).json()
        done = wait_job(client_b, job["job"])
        assert done["status"] == "failed"
        assert done["error"]["error"] == "InvalidSpec"


@pytest.fixture(scope="module")
def big_client(tmp_path_factory):
    root = tmp_path_factory.mktemp("gw_big")
    case = str(root / "case_000")
    write_phantom_case(PhantomSpec(seed=21), case)
    return TestClient(create_app(str(root)))


class TestFrames:
    def test_render_dimensions_and_scale(self, big_client):
        resp = big_client.get("/api/cases/case_000/frames/15.png")
        assert resp.status_code == 200
        assert resp.headers["content-type"] == "image/png"
        img = Image.open(io.BytesIO(resp.content))
        assert img.size == (320, 240)
        assert img.mode == "RGB"
        vmin = float(resp.headers["X-Temperature-Min"])
        vmax = float(resp.headers["X-Temperature-Max"])
        assert vmin < vmax
        assert resp.headers["X-Frame-Seconds"] == "15.0"

    def test_precool_render(self, big_client):
        resp = big_client.get("/api/cases/case_000/frames/-5.png")
        assert resp.status_code == 200
        assert resp.headers["X-Frame-Seconds"] == "-5.0"

    def test_nearest_frame_rule(self, big_client):
        resp = big_client.get("/api/cases/case_000/frames/14.4.png")
        assert resp.headers["X-Frame-Seconds"] == "14.0"

    def test_bad_time_404(self, big_client):
        assert big_client.get("/api/cases/case_000/frames/abc.png").status_code == 404

    def test_window_is_precool_minmax(self, big_client, tmp_path_factory):
        # frame 0 right after cooling must clip below the precool window,
        # so its coldest rendered pixel sits at the black end of the palette
        resp = big_client.get("/api/cases/case_000/frames/0.png")
        img = np.asarray(Image.open(io.BytesIO(resp.content)))
        assert img[120, 160].tolist() == [0, 0, 0]


class TestCurves:
    def test_six_series_per_nodule(self, client, study_a):
        cid = case_ids(study_a)[0]
        doc = client.get(f"/api/cases/{cid}/curves").json()
        (nod,) = doc["nodules"]
        names = [(s["region"], s["signal"]) for s in nod["series"]]
        assert names == [
            ("roi", "mean"), ("roi", "std"),
            ("win20", "mean"), ("win20", "std"),
            ("win40", "mean"), ("win40", "std"),
        ]
        assert len(doc["times"]) == 121
        for s in nod["series"]:
            assert len(s["samples"]) == 121

    def test_curves_need_segmentation(self, client_b, study_b):
        cid = case_ids(study_b)[0]  # still raw
        resp = client_b.get(f"/api/cases/{cid}/curves")
        assert resp.status_code == 409


class TestAnnotations:
    SQUARE = [[30.25, 20.25], [50.25, 20.25], [50.25, 40.25], [30.25, 40.25]]

    def test_round_trip(self, client, study_a):
        cid = case_ids(study_a)[1]
        body = {
            "annotations": [
                {"nodule_id": "n1", "point": [40.5, 30.25], "polygon": self.SQUARE}
            ]
        }
        resp = client.put(f"/api/cases/{cid}/annotations", json=body)
        assert resp.status_code == 200
        (ann,) = resp.json()["annotations"]
        assert ann["point"] == [40.5, 30.25]
        assert ann["polygon"] == self.SQUARE
        # server is the source of truth: a fresh GET shows the same polygon
        (got,) = client.get(f"/api/cases/{cid}").json()["annotations"]
        assert got == ann

    def test_put_invalidates_downstream(self, client, bundle, study_a):
        cid = case_ids(study_a)[2]
        d = pipeline.discover_cases(study_a)[2]
        pipeline.run_predict(d, bundle)
        assert client.get(f"/api/cases/{cid}/result").status_code == 200
        body = {"annotations": [{"nodule_id": "n1", "point": [40.0, 30.0]}]}
        assert client.put(f"/api/cases/{cid}/annotations", json=body).status_code == 200
        # features and prediction are gone until they are rerun
        resp = client.get(f"/api/cases/{cid}/result")
        assert resp.status_code == 409
        assert client.get(f"/api/cases/{cid}").json()["status"] == "segmented"
        pipeline.run_features(d)
        pipeline.run_predict(d, bundle)
        assert client.get(f"/api/cases/{cid}/result").status_code == 200

    def test_result_payload_shape(self, client, bundle, study_a):
        cid = case_ids(study_a)[3]
        d = pipeline.discover_cases(study_a)[3]
        rows = pipeline.run_predict(d, bundle)
        doc = client.get(f"/api/cases/{cid}/result").json()
        assert doc["schema"] == 1
        assert doc["vote_threshold"] == 2
        assert doc["nodules"] == rows

    def test_self_intersecting_polygon_422(self, client, study_a):
        cid = case_ids(study_a)[1]
        bowtie = [[10, 10], [30, 30], [30, 10], [10, 30]]
        body = {"annotations": [{"nodule_id": "n1", "point": [20, 20], "polygon": bowtie}]}
        resp = client.put(f"/api/cases/{cid}/annotations", json=body)
        assert resp.status_code == 422
        assert resp.json()["error"] == "InvalidAnnotation"

    def test_too_few_vertices_422(self, client, study_a):
        cid = case_ids(study_a)[1]
        body = {"annotations": [{"nodule_id": "n1", "point": [20, 20], "polygon": [[1, 1], [2, 2]]}]}
        assert client.put(f"/api/cases/{cid}/annotations", json=body).status_code == 422

    def test_empty_annotations_422(self, client, study_a):
        cid = case_ids(study_a)[1]
        resp = client.put(f"/api/cases/{cid}/annotations", json={"annotations": []})
        assert resp.status_code == 422

    def test_malformed_payload_422(self, client, study_a):
        cid = case_ids(study_a)[1]
        body = {"annotations": [{"nodule_id": "n1"}]}  # no point
        assert client.put(f"/api/cases/{cid}/annotations", json=body).status_code == 422

    def test_manual_mask_matches_shared_rasterizer(self, client, study_a):
        # the gateway must not grow its own rasterizer: a manual-segmentation
        # run over a PUT polygon must equal rasterize_polygon bit for bit
        cid = case_ids(study_a)[4]
        d = pipeline.discover_cases(study_a)[4]
        body = {
            "annotations": [
                {"nodule_id": "n1", "point": [48.0, 36.0], "polygon": self.SQUARE}
            ]
        }
        assert client.put(f"/api/cases/{cid}/annotations", json=body).status_code == 200
        job = client.post(
            f"/api/cases/{cid}/run", json={"stage": "segment", "segmenter": "manual"}
        ).json()
        done = wait_job(client, job["job"])
        assert done["status"] == "done", done["error"]
        stab = read_warps(os.path.join(d, "warps.jsonl"))
        _, sequence = read_case(d)
        poly = [(x, y) for x, y in self.SQUARE]
        want = rasterize_polygon(
            transport_polygon(stab, poly), sequence.width, sequence.height
        )
        assert done["result"]["pixels"] == want.count


class TestRegistrationViews:
    def test_rho_listing(self, client, study_a):
        cid = case_ids(study_a)[0]
        doc = client.get(f"/api/cases/{cid}/registration").json()
        assert len(doc["frames"]) == 6
        assert doc["review_required"] is False
        assert all(0.0 <= f["rho"] <= 1.0 for f in doc["frames"])
        assert doc["precool"]["converged"] is True

    def test_diff_renders(self, client, study_a):
        cid = case_ids(study_a)[0]
        doc = client.get(f"/api/cases/{cid}/registration").json()
        link = doc["frames"][3]
        for key in ("before", "after"):
            resp = client.get(link[key])
            assert resp.status_code == 200
            img = Image.open(io.BytesIO(resp.content))
            assert img.size == (96, 72)
        assert client.get(f"/api/cases/{cid}/registration/99/before.png").status_code == 404
        assert client.get(f"/api/cases/{cid}/registration/3/sideways.png").status_code == 404

    def test_registration_requires_alignment(self, client_b, study_b):
        cid = case_ids(study_b)[0]
        assert client_b.get(f"/api/cases/{cid}/registration").status_code == 409


class TestStaticHosting:
    def test_serves_built_ui(self, study_a, tmp_path):
        dist = tmp_path / "dist"
        dist.mkdir()
        (dist / "index.html").write_text("<!doctype html><title>review</title>")
        app = create_app(study_a, frontend_dist=str(dist))
        resp = TestClient(app).get("/")
        assert resp.status_code == 200
        assert "review" in resp.text

    def test_no_dist_no_mount(self, study_a, tmp_path):
        app = create_app(study_a, frontend_dist=str(tmp_path / "missing"))
        assert TestClient(app).get("/").status_code == 404
