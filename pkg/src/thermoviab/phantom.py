"""Synthetic localized-cooling thermal cases with known ground truth.

The temperature field is a closed-form function of (x, y, t): a smooth skin
base (linear gradient plus low-frequency plane waves), a cooled disk that
recovers exponentially, and an optional viable nodule that recovers faster
and settles at a positive equilibrium offset. Camera jitter is realized by
evaluating the field at shifted coordinates, so noise-free frames match the
closed form exactly; sensor noise is added per output pixel afterwards.

Each generated case carries a hidden ``truth.json`` sidecar (true ROI mask in
frame-0 coordinates, the per-frame jitter, and the spec echo) consumed only
by tests and never by the pipeline itself.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec
from .io import (
    CaseRecord,
    NoduleAnnotation,
    RoiMask,
    ThermalFrame,
    ThermalSequence,
    write_case,
    write_mask_pgm,
)

TWO_PI = 2.0 * math.pi

# (amplitude °C, kx rad/px, ky rad/px, phase) plane-wave texture components
DEFAULT_TEXTURE = (
    (0.25, TWO_PI / 55.0, TWO_PI / 41.0, 0.7),
    (0.15, TWO_PI / 34.0, -TWO_PI / 76.0, 2.1),
)


@dataclass
class PhantomSpec:
    """All knobs for one synthetic case; every field enters the closed form."""

    width: int = 320
    height: int = 240
    skin_temp: float = 33.0
    gradient: tuple[float, float] = (0.4, -0.3)  # °C across full width/height
    texture: tuple = DEFAULT_TEXTURE
    disk_center: tuple[float, float] | None = None  # default: frame center
    disk_radius: float = 60.0
    cooling_depth: float = 2.0
    skin_tau: float = 45.0
    disk_edge: float = 1.5
    nodule_center: tuple[float, float] | None = None  # default: disk center
    nodule_radius: float = 8.0
    nodule_edge: float = 1.0
    viable: bool = True
    delta: float = 0.4
    nodule_tau: float = 20.0
    noise_sigma: float = 0.04
    jitter_amp: float = 2.0
    precool_t: float = -5.0
    duration: float = 120.0
    rate: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise InvalidSpec("frame must be at least 16x16")
        for name in ("disk_radius", "cooling_depth", "skin_tau", "nodule_radius", "nodule_tau", "duration", "rate"):
            if getattr(self, name) <= 0:
                raise InvalidSpec(f"{name} must be positive")
        if self.noise_sigma < 0 or self.jitter_amp < 0:
            raise InvalidSpec("noise_sigma and jitter_amp must be non-negative")
        if self.nodule_tau > self.skin_tau:
            raise InvalidSpec("nodule recovery must not be slower than skin recovery")
        if self.precool_t >= 0:
            raise InvalidSpec("precool timestamp must be negative")
        if self.disk_center is None:
            self.disk_center = (self.width / 2.0, self.height / 2.0)
        if self.nodule_center is None:
            self.nodule_center = self.disk_center
        d = math.hypot(self.nodule_center[0] - self.disk_center[0], self.nodule_center[1] - self.disk_center[1])
        if d + self.nodule_radius > self.disk_radius:
            raise InvalidSpec("nodule must lie inside the cooled disk")

    @property
    def frame_count(self) -> int:
        return int(round(self.duration * self.rate))

    def frame_times(self) -> np.ndarray:
        return np.arange(self.frame_count) / self.rate


@dataclass
class PhantomTruth:
    """Hidden ground truth for one generated case."""

    mask: RoiMask  # alcohol-cooled region, frame-0 coordinates
    jitter: list[tuple[float, float, float]]  # (t, dx, dy); precool entry first
    spec: PhantomSpec


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def field_temperature(spec: PhantomSpec, xs, ys, t: float | None) -> np.ndarray:
    """Closed-form noise-free temperature at coordinates (xs, ys), float64.

    ``t`` is seconds since cooling; ``None`` gives the pre-cooling steady
    state. Coordinates are subpixel (pixel centers at j+0.5, i+0.5).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    gx, gy = spec.gradient
    base = spec.skin_temp + gx * (xs / spec.width - 0.5) + gy * (ys / spec.height - 0.5)
    for a, kx, ky, phase in spec.texture:
        base = base + a * np.sin(kx * xs + ky * ys + phase)
    r_n = np.hypot(xs - spec.nodule_center[0], ys - spec.nodule_center[1])
    w_n = _sigmoid((spec.nodule_radius - r_n) / spec.nodule_edge)
    delta_eff = spec.delta if spec.viable else 0.0
    if t is None:
        return base + delta_eff * w_n
    r_d = np.hypot(xs - spec.disk_center[0], ys - spec.disk_center[1])
    w_d = _sigmoid((spec.disk_radius - r_d) / spec.disk_edge)
    nodule_tau = spec.nodule_tau if spec.viable else spec.skin_tau
    tau = spec.skin_tau + w_n * (nodule_tau - spec.skin_tau)
    cooled = -spec.cooling_depth * w_d * np.exp(-t / tau)
    rebound = delta_eff * w_n * (1.0 - np.exp(-t / nodule_tau))
    return base + cooled + rebound


def _pixel_centers(spec: PhantomSpec):
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width]
    return xs + 0.5, ys + 0.5


def generate_case(spec: PhantomSpec) -> tuple[CaseRecord, ThermalSequence, PhantomTruth]:
    """Generate one case; deterministic given ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    n = spec.frame_count
    if spec.jitter_amp > 0:
        jit = rng.uniform(-spec.jitter_amp, spec.jitter_amp, size=(n + 1, 2))
    else:
        jit = np.zeros((n + 1, 2))
    xs, ys = _pixel_centers(spec)

    def render(t, jxy):
        temps = field_temperature(spec, xs + jxy[0], ys + jxy[1], t)
        if spec.noise_sigma > 0:
            temps = temps + rng.normal(0.0, spec.noise_sigma, size=temps.shape)
        return ThermalFrame(temps=temps.astype(np.float32), timestamp=float(t if t is not None else spec.precool_t))

    precool = render(None, jit[0])
    frames = [render(t, jit[k + 1]) for k, t in enumerate(spec.frame_times())]
    sequence = ThermalSequence(precool=precool, frames=frames, nominal_rate=spec.rate)

    # annotation marks the nodule as it appears in the (jittered) precool image
    point = (spec.nodule_center[0] - jit[0][0], spec.nodule_center[1] - jit[0][1])
    record = CaseRecord(
        case_id=f"phantom-{spec.seed}",
        participant_id=f"participant-{spec.seed}",
        annotations=[NoduleAnnotation(nodule_id="n1", point=point)],
        label="viable" if spec.viable else "nonviable",
        provenance="phantom",
    )

    # truth mask lives in frame-0 coordinates (frame 0 carries jitter jit[1])
    r_d = np.hypot(xs + jit[1][0] - spec.disk_center[0], ys + jit[1][1] - spec.disk_center[1])
    truth = PhantomTruth(
        mask=RoiMask(r_d <= spec.disk_radius),
        jitter=[(spec.precool_t, float(jit[0][0]), float(jit[0][1]))]
        + [(float(t), float(jit[k + 1][0]), float(jit[k + 1][1])) for k, t in enumerate(spec.frame_times())],
        spec=spec,
    )
    return record, sequence, truth


def write_phantom_case(
    spec: PhantomSpec,
    case_dir,
    case_id: str | None = None,
    participant_id: str | None = None,
) -> tuple[CaseRecord, ThermalSequence, PhantomTruth]:
    """Generate and persist one case plus its hidden truth sidecar."""
    record, sequence, truth = generate_case(spec)
    if case_id is not None:
        record.case_id = case_id
    if participant_id is not None:
        record.participant_id = participant_id
    write_case(record, sequence, case_dir)
    write_mask_pgm(truth.mask, os.path.join(case_dir, "truth_mask.pgm"))
    sidecar = {
        "true_mask": "truth_mask.pgm",
        "jitter": [{"t": t, "dx": dx, "dy": dy} for t, dx, dy in truth.jitter],
        "spec": dataclasses.asdict(spec),
    }
    with open(os.path.join(case_dir, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return record, sequence, truth


def read_truth(case_dir) -> dict:
    with open(os.path.join(case_dir, "truth.json"), encoding="utf-8") as fh:
        return json.load(fh)


def generate_study(
    out_dir,
    n_cases: int,
    viable_fraction: float = 0.5,
    seed: int = 0,
    template: PhantomSpec | None = None,
) -> list[str]:
    """Generate a balanced labelled dataset with per-case nuisance variation.

    Base temperature varies ±1 °C, the disk radius ±20%, and viable cases
    draw their equilibrium offset from [0.25, 0.6] °C. Labels are balanced to
    within one case of the requested fraction. Returns the case directories
    and writes a ``study.json`` manifest.
    """
    if n_cases < 4:
        raise InvalidSpec("a study needs at least 4 cases")
    if not (0.0 < viable_fraction < 1.0):
        raise InvalidSpec("viable_fraction must be in (0, 1)")
    template = template or PhantomSpec()
    rng = np.random.default_rng(seed)
    n_viable = int(math.floor(n_cases * viable_fraction + 0.5))
    n_viable = min(max(n_viable, 1), n_cases - 1)
    labels = np.array([True] * n_viable + [False] * (n_cases - n_viable))
    rng.shuffle(labels)

    os.makedirs(out_dir, exist_ok=True)
    entries, dirs = [], []
    for i, viable in enumerate(labels):
        radius = template.disk_radius * rng.uniform(0.8, 1.2)
        cx = template.width / 2.0 + rng.uniform(-4, 4)
        cy = template.height / 2.0 + rng.uniform(-4, 4)
        max_off = max(radius - template.nodule_radius - 3.0, 0.0)
        ang = rng.uniform(0, TWO_PI)
        off = rng.uniform(0, min(max_off, 0.5 * radius))
        phases = rng.uniform(0, TWO_PI, size=len(template.texture))
        spec = dataclasses.replace(
            template,
            skin_temp=template.skin_temp + rng.uniform(-1.0, 1.0),
            texture=tuple((a, kx, ky, float(p)) for (a, kx, ky, _), p in zip(template.texture, phases)),
            disk_center=(cx, cy),
            disk_radius=radius,
            nodule_center=(cx + off * math.cos(ang), cy + off * math.sin(ang)),
            viable=bool(viable),
            delta=float(rng.uniform(0.25, 0.6)) if viable else template.delta,
            seed=int(rng.integers(0, 2**31 - 1)),
        )
        case_id = f"case{i:03d}"
        case_dir = os.path.join(out_dir, case_id)
        write_phantom_case(spec, case_dir, case_id=case_id, participant_id=f"p{i:03d}")
        entries.append({"case_id": case_id, "dir": case_id, "label": "viable" if viable else "nonviable"})
        dirs.append(case_dir)
    with open(os.path.join(out_dir, "study.json"), "w", encoding="utf-8") as fh:
        json.dump({"seed": seed, "n_cases": n_cases, "viable_fraction": viable_fraction, "cases": entries}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return dirs
