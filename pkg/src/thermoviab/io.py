"""On-disk case format and in-memory data model.

A case directory holds:

``case.json``
    Manifest with ids, label, annotations, the frame index (timestamps and
    byte offsets) and the payload checksum.
``frames.bin``
    Binary payload: a 20-byte header (``TVFB`` magic, format version, width,
    height, frame count; little-endian uint32 after the magic) followed by
    row-major little-endian float32 temperature rasters in °C, frames
    concatenated precool-first.

Masks are persisted as binary PGM (P5, set pixels stored as 255).

Coordinates are subpixel with the origin at the top-left pixel's top-left
corner; pixel (i, j) (row i, column j) has center (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptManifest,
    CorruptPayload,
    DegeneratePolygon,
    DimensionMismatch,
    InvalidAnnotation,
    InvalidTemperature,
    IoFailure,
    MissingAnnotation,
    MissingManifest,
    NonMonotonicTimestamps,
)

PAYLOAD_MAGIC = b"TVFB"
PAYLOAD_VERSION = 1
PAYLOAD_HEADER = struct.Struct("<4sIIII")  # magic, version, width, height, n_frames

TEMP_MIN_C = 0.0
TEMP_MAX_C = 60.0
MAX_TIMESTAMP_S = 125.0

LABELS = ("viable", "nonviable", "unknown")
PROVENANCES = ("real", "phantom")


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------

@dataclass
class ThermalFrame:
    """One temperature raster (°C) with its capture time in seconds since
    cooling; negative for the pre-cooling image."""

    temps: np.ndarray  # (height, width) float32
    timestamp: float

    def __post_init__(self):
        self.temps = np.asarray(self.temps, dtype=np.float32)
        if self.temps.ndim != 2 or self.temps.size == 0:
            raise DimensionMismatch(f"frame must be a non-empty 2D grid, got shape {self.temps.shape}")
        if not np.all(np.isfinite(self.temps)):
            raise InvalidTemperature("non-finite temperature value")
        lo, hi = float(self.temps.min()), float(self.temps.max())
        if lo < TEMP_MIN_C or hi > TEMP_MAX_C:
            raise InvalidTemperature(f"temperatures outside [{TEMP_MIN_C}, {TEMP_MAX_C}] °C: [{lo:.3f}, {hi:.3f}]")
        self.timestamp = float(self.timestamp)

    @property
    def height(self) -> int:
        return self.temps.shape[0]

    @property
    def width(self) -> int:
        return self.temps.shape[1]


@dataclass
class ThermalSequence:
    """One pre-cooling image plus the post-cooling video for a nodule site."""

    precool: ThermalFrame
    frames: list[ThermalFrame]
    nominal_rate: float = 1.0

    def __post_init__(self):
        if self.precool.timestamp >= 0:
            raise NonMonotonicTimestamps("precool timestamp must be negative")
        if not self.frames:
            raise DimensionMismatch("sequence has no video frames")
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise NonMonotonicTimestamps("frame timestamps must be strictly increasing")
        if ts[0] < 0:
            raise NonMonotonicTimestamps("first video frame timestamp must be >= 0")
        if ts[-1] > MAX_TIMESTAMP_S:
            raise NonMonotonicTimestamps(f"last timestamp {ts[-1]} exceeds {MAX_TIMESTAMP_S} s")
        shape = self.precool.temps.shape
        for f in self.frames:
            if f.temps.shape != shape:
                raise DimensionMismatch(f"frame at t={f.timestamp} has shape {f.temps.shape}, expected {shape}")

    @property
    def height(self) -> int:
        return self.precool.height

    @property
    def width(self) -> int:
        return self.precool.width

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])


@dataclass
class NoduleAnnotation:
    """A manually marked nodule: a subpixel point and an optional outline
    polygon, both in precool-frame coordinates."""

    nodule_id: str
    point: tuple[float, float]
    roi_polygon: list[tuple[float, float]] | None = None

    def __post_init__(self):
        if not self.nodule_id:
            raise InvalidAnnotation("nodule_id must be non-empty")
        if len(self.point) != 2 or not all(math.isfinite(v) for v in self.point):
            raise InvalidAnnotation(f"bad nodule point {self.point!r}")
        self.point = (float(self.point[0]), float(self.point[1]))
        if self.roi_polygon is not None:
            poly = [(float(x), float(y)) for x, y in self.roi_polygon]
            if len(poly) < 3:
                raise InvalidAnnotation("polygon needs at least 3 vertices")
            if not all(math.isfinite(x) and math.isfinite(y) for x, y in poly):
                raise InvalidAnnotation("polygon has non-finite vertex")
            if not polygon_is_simple(poly):
                raise InvalidAnnotation("polygon is self-intersecting")
            self.roi_polygon = poly


@dataclass
class CaseRecord:
    """Manifest data binding a sequence to its annotations and label."""

    case_id: str
    participant_id: str
    annotations: list[NoduleAnnotation]
    label: str = "unknown"
    provenance: str = "phantom"

    def __post_init__(self):
        if not self.case_id:
            raise CorruptManifest("case_id must be non-empty")
        if self.label not in LABELS:
            raise CorruptManifest(f"label {self.label!r} not one of {LABELS}")
        if self.provenance not in PROVENANCES:
            raise CorruptManifest(f"provenance {self.provenance!r} not one of {PROVENANCES}")
        if not self.annotations:
            raise MissingAnnotation(f"case {self.case_id} has no annotations")
        ids = [a.nodule_id for a in self.annotations]
        if len(set(ids)) != len(ids):
            raise InvalidAnnotation("duplicate nodule_id")


@dataclass
class RoiMask:
    """Bitmask over the frame grid; 1 marks the alcohol-cooled region."""

    pixels: np.ndarray  # (height, width) bool

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels).astype(bool)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise DimensionMismatch(f"mask must be a non-empty 2D grid, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def count(self) -> int:
        return int(self.pixels.sum())


# --------------------------------------------------------------------------
# polygons
# --------------------------------------------------------------------------

def _orientation(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _on_segment(ax, ay, bx, by, px, py):
    return min(ax, bx) <= px <= max(ax, bx) and min(ay, by) <= py <= max(ay, by)


def _segments_intersect(p1, p2, p3, p4):
    d1 = _orientation(*p3, *p4, *p1)
    d2 = _orientation(*p3, *p4, *p2)
    d3 = _orientation(*p1, *p2, *p3)
    d4 = _orientation(*p1, *p2, *p4)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and ((d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)):
        return True
    if d1 == 0 and _on_segment(*p3, *p4, *p1):
        return True
    if d2 == 0 and _on_segment(*p3, *p4, *p2):
        return True
    if d3 == 0 and _on_segment(*p1, *p2, *p3):
        return True
    if d4 == 0 and _on_segment(*p1, *p2, *p4):
        return True
    return False


def polygon_is_simple(poly: list[tuple[float, float]]) -> bool:
    """Non-adjacent edges must not touch; zero-length edges are skipped."""
    n = len(poly)
    edges = []
    for k in range(n):
        a, b = poly[k], poly[(k + 1) % n]
        if a != b:
            edges.append((k, a, b))
    for i in range(len(edges)):
        ki, a1, b1 = edges[i]
        for j in range(i + 1, len(edges)):
            kj, a2, b2 = edges[j]
            # adjacent edges share one vertex and may touch there only
            if a1 in (a2, b2) or b1 in (a2, b2):
                continue
            if _segments_intersect(a1, b1, a2, b2):
                return False
    return True


def polygon_area(poly: list[tuple[float, float]]) -> float:
    s = 0.0
    n = len(poly)
    for k in range(n):
        x1, y1 = poly[k]
        x2, y2 = poly[(k + 1) % n]
        s += x1 * y2 - x2 * y1
    return abs(s) / 2.0


def rasterize_polygon(poly: list[tuple[float, float]], width: int, height: int) -> RoiMask:
    """Even-odd fill: a pixel is set iff its center lies inside the polygon.

    Scanline implementation; a center exactly on an edge follows the
    half-open crossing convention (crossings strictly to its right count).
    """
    if len(poly) < 3:
        raise DegeneratePolygon("polygon needs at least 3 vertices")
    if polygon_area(poly) < 1.0:
        raise DegeneratePolygon(f"polygon area {polygon_area(poly):.3f} px^2 is below 1")
    mask = np.zeros((height, width), dtype=bool)
    xs = np.arange(width) + 0.5
    n = len(poly)
    for i in range(height):
        yc = i + 0.5
        crossings = []
        for k in range(n):
            x1, y1 = poly[k]
            x2, y2 = poly[(k + 1) % n]
            if (y1 > yc) != (y2 > yc):
                crossings.append(x1 + (yc - y1) * (x2 - x1) / (y2 - y1))
        if not crossings:
            continue
        c = np.array(crossings)
        mask[i] = (c[None, :] > xs[:, None]).sum(axis=1) % 2 == 1
    return RoiMask(mask)


# --------------------------------------------------------------------------
# PGM masks
# --------------------------------------------------------------------------

def write_mask_pgm(mask: RoiMask, path) -> None:
    data = (mask.pixels.astype(np.uint8) * 255).tobytes()
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header + data)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_mask_pgm(path) -> RoiMask:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    # header: magic, width, height, maxval tokens separated by whitespace/comments
    tokens, pos = [], 0
    while len(tokens) < 4 and pos < len(raw):
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        if raw[pos : pos + 1].isspace():
            pos += 1
            continue
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise CorruptPayload(f"{path}: not a binary PGM")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = raw[pos + 1 :]
    if len(data) < width * height:
        raise CorruptPayload(f"{path}: truncated PGM payload")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height)
    return RoiMask(pixels.reshape(height, width) > maxval // 2)


# --------------------------------------------------------------------------
# case directories
# --------------------------------------------------------------------------

def _payload_bytes(sequence: ThermalSequence) -> tuple[bytes, list[int]]:
    frames = [sequence.precool] + list(sequence.frames)
    header = PAYLOAD_HEADER.pack(PAYLOAD_MAGIC, PAYLOAD_VERSION, sequence.width, sequence.height, len(frames))
    chunks, offsets = [header], []
    pos = len(header)
    for f in frames:
        raw = np.ascontiguousarray(f.temps, dtype="<f4").tobytes()
        offsets.append(pos)
        chunks.append(raw)
        pos += len(raw)
    return b"".join(chunks), offsets


def write_case(record: CaseRecord, sequence: ThermalSequence, case_dir) -> None:
    """Persist a validated case; read_case(write_case(x)) is bit-exact on
    temperatures, timestamps, and annotations."""
    validate_case(record, sequence)
    payload, offsets = _payload_bytes(sequence)
    frames = [sequence.precool] + list(sequence.frames)
    manifest = {
        "schema_version": 1,
        "case_id": record.case_id,
        "participant_id": record.participant_id,
        "label": record.label,
        "provenance": record.provenance,
        "width": sequence.width,
        "height": sequence.height,
        "nominal_rate_hz": sequence.nominal_rate,
        "frames": [{"t_seconds": f.timestamp, "offset": off} for f, off in zip(frames, offsets)],
        "checksum_sha256": hashlib.sha256(payload).hexdigest(),
        "annotations": [
            {
                "nodule_id": a.nodule_id,
                "point": [a.point[0], a.point[1]],
                "polygon": [[x, y] for x, y in a.roi_polygon] if a.roi_polygon is not None else None,
            }
            for a in record.annotations
        ],
    }
    try:
        os.makedirs(case_dir, exist_ok=True)
        with open(os.path.join(case_dir, "frames.bin"), "wb") as fh:
            fh.write(payload)
        tmp = os.path.join(case_dir, "case.json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, os.path.join(case_dir, "case.json"))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_manifest(case_dir) -> dict:
    path = os.path.join(case_dir, "case.json")
    if not os.path.exists(path):
        raise MissingManifest(f"{path} does not exist")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptManifest(f"{path}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise CorruptManifest(f"{path}: manifest must be a JSON object")
    return manifest


def _annotations_from_manifest(entries) -> list[NoduleAnnotation]:
    if not entries:
        raise MissingAnnotation("manifest lists zero annotations")
    out = []
    for e in entries:
        try:
            poly = e.get("polygon")
            out.append(
                NoduleAnnotation(
                    nodule_id=str(e["nodule_id"]),
                    point=(float(e["point"][0]), float(e["point"][1])),
                    roi_polygon=[(float(x), float(y)) for x, y in poly] if poly is not None else None,
                )
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise InvalidAnnotation(f"bad annotation entry {e!r}: {exc}") from exc
    return out


def read_case(case_dir) -> tuple[CaseRecord, ThermalSequence]:
    """Load and fully validate one case directory."""
    manifest = read_manifest(case_dir)
    try:
        width = int(manifest["width"])
        height = int(manifest["height"])
        entries = list(manifest["frames"])
        checksum = manifest["checksum_sha256"]
        rate = float(manifest.get("nominal_rate_hz", 1.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptManifest(f"manifest missing/invalid field: {exc}") from exc

    payload_path = os.path.join(case_dir, "frames.bin")
    try:
        with open(payload_path, "rb") as fh:
            payload = fh.read()
    except OSError as exc:
        raise CorruptPayload(f"{payload_path}: {exc}") from exc
    if hashlib.sha256(payload).hexdigest() != checksum:
        raise CorruptPayload(f"{payload_path}: checksum mismatch")
    if len(payload) < PAYLOAD_HEADER.size:
        raise CorruptPayload(f"{payload_path}: too short for header")
    magic, version, pw, ph, n_frames = PAYLOAD_HEADER.unpack_from(payload)
    if magic != PAYLOAD_MAGIC or version != PAYLOAD_VERSION:
        raise CorruptPayload(f"{payload_path}: bad magic/version")
    if (pw, ph) != (width, height):
        raise DimensionMismatch(f"payload is {pw}x{ph}, manifest says {width}x{height}")
    if n_frames != len(entries):
        raise CorruptPayload(f"payload holds {n_frames} frames, manifest lists {len(entries)}")

    frame_bytes = width * height * 4
    entries = sorted(entries, key=lambda e: float(e["t_seconds"]))
    frames = []
    for e in entries:
        off = int(e["offset"])
        if off < PAYLOAD_HEADER.size or off + frame_bytes > len(payload):
            raise CorruptPayload(f"frame offset {off} out of payload bounds")
        temps = np.frombuffer(payload, dtype="<f4", count=width * height, offset=off).reshape(height, width)
        frames.append(ThermalFrame(temps=temps.copy(), timestamp=float(e["t_seconds"])))
    if not frames or frames[0].timestamp >= 0:
        raise NonMonotonicTimestamps("manifest must list exactly one pre-cooling frame (negative t_seconds) first")
    precool, video = frames[0], frames[1:]
    if any(f.timestamp < 0 for f in video):
        raise NonMonotonicTimestamps("multiple frames carry negative timestamps")
    ts = [f.timestamp for f in video]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise NonMonotonicTimestamps("duplicate timestamps in frame index")

    sequence = ThermalSequence(precool=precool, frames=video, nominal_rate=rate)
    record = CaseRecord(
        case_id=str(manifest.get("case_id", "")),
        participant_id=str(manifest.get("participant_id", "")),
        annotations=_annotations_from_manifest(manifest.get("annotations", [])),
        label=manifest.get("label", "unknown"),
        provenance=manifest.get("provenance", "phantom"),
    )
    validate_case(record, sequence)
    return record, sequence


def validate_case(record: CaseRecord, sequence: ThermalSequence) -> None:
    """Joint invariants that need both the record and the raster grid."""
    if record.label == "unknown" and record.provenance == "real":
        pass  # permitted: predict-mode cases carry unknown labels
    for a in record.annotations:
        x, y = a.point
        if not (0.0 <= x <= sequence.width and 0.0 <= y <= sequence.height):
            raise InvalidAnnotation(f"nodule {a.nodule_id} point {a.point} outside {sequence.width}x{sequence.height} frame")


# --------------------------------------------------------------------------
# decimation
# --------------------------------------------------------------------------

def decimate_to_1hz(sequence: ThermalSequence) -> ThermalSequence:
    """Mean-decimate the video to one frame per second.

    Frames are grouped into one-second buckets by floor(t); each bucket
    becomes one frame (per-pixel mean) stamped at the bucket start. A video
    already sampled at integer seconds passes through unchanged.
    """
    buckets: dict[int, list[ThermalFrame]] = {}
    for f in sequence.frames:
        buckets.setdefault(int(math.floor(f.timestamp)), []).append(f)
    frames = []
    for sec in sorted(buckets):
        group = buckets[sec]
        if len(group) == 1 and group[0].timestamp == float(sec):
            frames.append(group[0])
            continue
        mean = np.mean(np.stack([g.temps.astype(np.float64) for g in group]), axis=0)
        frames.append(ThermalFrame(temps=mean.astype(np.float32), timestamp=float(sec)))
    return ThermalSequence(precool=sequence.precool, frames=frames, nominal_rate=1.0)
