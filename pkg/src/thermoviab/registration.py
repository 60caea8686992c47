"""Sequence stabilization by enhanced-correlation-coefficient alignment.

Every video frame (and the pre-cooling image) is aligned to frame 0. A warp
is stored as the *sampling* map from frame-0 coordinates to moving-frame
coordinates: ``aligned(x) = moving(W(x))``. Marks made on the pre-cooling
image therefore travel into frame-0 coordinates through the inverse map.

Coordinates are corner-origin subpixel positions (pixel centers at half
integers), which makes the pyramid change of scale a pure doubling: a
position measured in coarse-level units is exactly half the same position
in fine-level units, so only the translational part of a warp rescales
between levels.

The solver is the forward-additive Gauss-Newton scheme for the enhanced
correlation coefficient: images are zero-meaned over the valid support, the
Jacobian is rebuilt every iteration from resampled gradients, and the
closed-form step length lambda scales the reference so the objective is
invariant to affine intensity changes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import Diverged, FlatImage, IoFailure, NonInvertibleWarp
from .io import RoiMask, ThermalSequence
from .segmentation import otsu_threshold

WARP_KINDS = ("translation", "euclidean", "affine")

REVIEW_RHO = 0.9


@dataclass
class WarpModel:
    """Geometric map with kind-specific parameters.

    translation: [tx, ty]
    euclidean:   [theta, tx, ty]
    affine:      [a, b, tx, c, d, ty]  (2x3 row-major)
    """

    kind: str
    params: np.ndarray

    def __post_init__(self):
        if self.kind not in WARP_KINDS:
            raise ValueError(f"unknown warp kind {self.kind!r}")
        self.params = np.asarray(self.params, dtype=np.float64).copy()
        expected = {"translation": 2, "euclidean": 3, "affine": 6}[self.kind]
        if self.params.shape != (expected,):
            raise ValueError(f"{self.kind} warp needs {expected} parameters, got {self.params.shape}")

    def matrix(self) -> np.ndarray:
        """2x3 sampling matrix mapping frame-0 coords to moving coords."""
        p = self.params
        if self.kind == "translation":
            return np.array([[1.0, 0.0, p[0]], [0.0, 1.0, p[1]]])
        if self.kind == "euclidean":
            c, s = math.cos(p[0]), math.sin(p[0])
            return np.array([[c, -s, p[1]], [s, c, p[2]]])
        return np.array([[p[0], p[1], p[2]], [p[3], p[4], p[5]]])


def identity_warp(kind: str) -> WarpModel:
    if kind == "translation":
        return WarpModel(kind, np.zeros(2))
    if kind == "euclidean":
        return WarpModel(kind, np.zeros(3))
    return WarpModel(kind, np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))


def warp_from_matrix(kind: str, m) -> WarpModel:
    m = np.asarray(m, dtype=np.float64).reshape(2, 3)
    if kind == "translation":
        return WarpModel(kind, np.array([m[0, 2], m[1, 2]]))
    if kind == "euclidean":
        return WarpModel(kind, np.array([math.atan2(m[1, 0], m[0, 0]), m[0, 2], m[1, 2]]))
    return WarpModel(kind, np.array([m[0, 0], m[0, 1], m[0, 2], m[1, 0], m[1, 1], m[1, 2]]))


def apply_warp_to_point(warp: WarpModel, point, inverse: bool = False) -> tuple[float, float]:
    """Map one subpixel point; ``inverse=True`` carries a position seen in
    the moving frame into frame-0 coordinates."""
    m = warp.matrix()
    a, t = m[:, :2], m[:, 2]
    p = np.asarray(point, dtype=np.float64)
    if not inverse:
        q = a @ p + t
        return float(q[0]), float(q[1])
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if abs(det) < 1e-12:
        raise NonInvertibleWarp(f"warp determinant {det} too small to invert")
    q = np.linalg.solve(a, p - t)
    return float(q[0]), float(q[1])


def _bilinear(img: np.ndarray, xq: np.ndarray, yq: np.ndarray):
    """Sample at subpixel positions; valid where the 4-point stencil exists."""
    h, w = img.shape
    u = xq - 0.5
    v = yq - 0.5
    valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    j0 = np.minimum(uc.astype(np.int64), w - 2)
    i0 = np.minimum(vc.astype(np.int64), h - 2)
    fx = uc - j0
    fy = vc - i0
    out = (
        img[i0, j0] * (1 - fx) * (1 - fy)
        + img[i0, j0 + 1] * fx * (1 - fy)
        + img[i0 + 1, j0] * (1 - fx) * fy
        + img[i0 + 1, j0 + 1] * fx * fy
    )
    return out, valid


def _as_image(x) -> np.ndarray:
    return np.asarray(getattr(x, "temps", x), dtype=np.float64)


def resample(moving, warp: WarpModel):
    """Pull the moving image onto the frame-0 grid.

    Returns (aligned, valid): invalid pixels (stencil outside the moving
    frame) are zero-filled and flagged.
    """
    img = _as_image(moving)
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    m = warp.matrix()
    xc = xs + 0.5
    yc = ys + 0.5
    xq = m[0, 0] * xc + m[0, 1] * yc + m[0, 2]
    yq = m[1, 0] * xc + m[1, 1] * yc + m[1, 2]
    out, valid = _bilinear(img, xq, yq)
    out[~valid] = 0.0
    return out, valid


@dataclass
class EccConfig:
    max_iterations: int = 100
    epsilon: float = 1e-5
    levels: int = 2
    min_overlap: float = 0.5  # fraction of mask pixels that must stay in frame
    max_rho_drops: int = 5  # consecutive correlation drops before giving up
    collapse_margin: float = 0.05  # drop spell must lose this much rho to count
    plateau_patience: int = 8  # iterations without improvement before stopping
    min_level_size: int = 16


@dataclass
class EccResult:
    warp: WarpModel
    rho: float
    iterations: int
    converged: bool
    rho_history: list[float] = field(default_factory=list)


def _scale_translation(kind: str, params: np.ndarray, s: float) -> np.ndarray:
    p = params.copy()
    if kind == "translation":
        p *= s
    elif kind == "euclidean":
        p[1:] *= s
    else:
        p[2] *= s
        p[5] *= s
    return p


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    c = img[: 2 * h2, : 2 * w2]
    return c.reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def _downsample_mask(mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    h2, w2 = h // 2, w // 2
    c = mask[: 2 * h2, : 2 * w2]
    return c.reshape(h2, 2, w2, 2).all(axis=(1, 3))


def _xcorr_translation(ref: np.ndarray, mov: np.ndarray, mask: np.ndarray) -> tuple[int, int]:
    """Integer-pixel translation seed from FFT cross-correlation.

    Searches lags within a quarter of each dimension; garbage on flat
    images is harmless because the solver rejects those separately.
    """
    h, w = ref.shape
    if not mask.any():
        return 0, 0
    r = np.where(mask, ref - ref[mask].mean(), 0.0)
    m = np.where(mask, mov - mov[mask].mean(), 0.0)
    c = np.fft.irfft2(np.conj(np.fft.rfft2(r)) * np.fft.rfft2(m), s=(h, w))
    dys = np.arange(-(h // 4), h // 4 + 1)
    dxs = np.arange(-(w // 4), w // 4 + 1)
    sub = c[np.ix_(dys % h, dxs % w)]
    k = int(np.argmax(sub))
    return int(dxs[k % len(dxs)]), int(dys[k // len(dxs)])


def _jacobian(kind: str, params, xs, ys, gx, gy) -> np.ndarray:
    if kind == "translation":
        return np.stack([gx, gy], axis=1)
    if kind == "euclidean":
        c, s = math.cos(params[0]), math.sin(params[0])
        dtheta = gx * (-s * xs - c * ys) + gy * (c * xs - s * ys)
        return np.stack([dtheta, gx, gy], axis=1)
    return np.stack([gx * xs, gx * ys, gx, gy * xs, gy * ys, gy], axis=1)


class _Infeasible(Exception):
    """A candidate warp lost the required mask overlap; internal signal."""


def _ecc_level(ref, mov, kind, params, mask, cfg):
    h, w = ref.shape
    ys, xs = np.mgrid[0:h, 0:w]
    xc = (xs + 0.5).astype(np.float64)
    yc = (ys + 0.5).astype(np.float64)
    gy_m, gx_m = np.gradient(mov)

    if mask.sum() == 0 or np.var(ref[mask]) < 1e-12:
        raise FlatImage("reference has no contrast over the mask")
    mask_count = int(mask.sum())

    def evaluate(p):
        m = WarpModel(kind, p).matrix()
        xq = m[0, 0] * xc + m[0, 1] * yc + m[0, 2]
        yq = m[1, 0] * xc + m[1, 1] * yc + m[1, 2]
        iw, valid = _bilinear(mov, xq, yq)
        sup = valid & mask
        if int(sup.sum()) < cfg.min_overlap * mask_count:
            raise _Infeasible
        ir0 = ref[sup] - ref[sup].mean()
        iw0 = iw[sup] - iw[sup].mean()
        nr = np.linalg.norm(ir0)
        nw = np.linalg.norm(iw0)
        if nr * nr < 1e-12 * ir0.size or nw * nw < 1e-12 * iw0.size:
            raise FlatImage("image has no contrast over the warped support")
        rho = float(ir0 @ iw0 / (nr * nw))
        return rho, sup, ir0, iw0, nw, xq, yq

    history: list[float] = []
    iterations = 0
    converged = False
    best_rho, best_params = -np.inf, params.copy()
    drops = 0
    prev_rho = -np.inf
    spell_start = 0.0
    since_best = 0

    for _ in range(cfg.max_iterations):
        try:
            rho, sup, ir0, iw0, nw, xq, yq = evaluate(params)
        except _Infeasible:
            if iterations == 0:
                raise Diverged("more than half the mask fell outside the moving frame")
            # the step left the frame: an infeasible candidate, not a
            # divergence; fall back to the best feasible iterate
            params = best_params.copy()
            break
        history.append(rho)
        iterations += 1
        if rho > best_rho + 1e-12:
            best_rho, best_params = rho, params.copy()
            since_best = 0
        else:
            best_rho = max(best_rho, rho)
            since_best += 1
        if rho < prev_rho:
            if drops == 0:
                spell_start = prev_rho
            drops += 1
        else:
            drops = 0
        prev_rho = rho
        # a long drop spell is divergence only when rho actually collapses;
        # a gentle slide is the solver settling at its own fixed point,
        # slightly off the correlation maximum when the images differ
        if drops >= cfg.max_rho_drops and spell_start - rho > cfg.collapse_margin:
            raise Diverged(f"correlation fell {drops} iterations in a row")
        if since_best >= cfg.plateau_patience:
            break  # oscillating around the optimum; best iterate is kept

        gxw, _ = _bilinear(gx_m, xq, yq)
        gyw, _ = _bilinear(gy_m, xq, yq)
        g = _jacobian(kind, params, xc[sup], yc[sup], gxw[sup], gyw[sup])
        g = g - g.mean(axis=0)
        hess = g.T @ g
        gw = g.T @ iw0
        gr = g.T @ ir0
        try:
            hw = np.linalg.solve(hess, gw)
        except np.linalg.LinAlgError as exc:
            raise Diverged("singular normal equations") from exc
        num = nw * nw - gw @ hw
        den = ir0 @ iw0 - gr @ hw
        if den <= 0:
            raise Diverged("projected correlation lost its positive margin")
        lam = num / den
        err = lam * ir0 - iw0
        dp = np.linalg.solve(hess, g.T @ err)
        params = params + dp
        if np.linalg.norm(dp) < cfg.epsilon:
            converged = True
            break

    # score the final iterate too, so the best-rho pick sees every candidate
    try:
        rho, *_ = evaluate(params)
    except _Infeasible:
        pass
    else:
        history.append(rho)
        if rho > best_rho:
            best_rho, best_params = rho, params.copy()
    return best_params, best_rho, iterations, converged, history


def ecc_align(reference, moving, kind: str = "translation", mask=None, config: EccConfig | None = None, init: WarpModel | None = None) -> EccResult:
    """Align ``moving`` onto ``reference``; returns the best-correlation
    iterate even when the iteration cap is hit before convergence."""
    cfg = config or EccConfig()
    ref = _as_image(reference)
    mov = _as_image(moving)
    if ref.shape != mov.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {mov.shape}")
    if init is not None and init.kind != kind:
        raise ValueError(f"init warp kind {init.kind!r} does not match {kind!r}")
    m = np.ones(ref.shape, dtype=bool) if mask is None else np.asarray(getattr(mask, "pixels", mask)).astype(bool)

    pyramid = [(ref, mov, m)]
    while len(pyramid) < cfg.levels and min(pyramid[-1][0].shape) // 2 >= cfg.min_level_size:
        r, v, mk = pyramid[-1]
        pyramid.append((_downsample(r), _downsample(v), _downsample_mask(mk)))

    if init is not None:
        params = _scale_translation(kind, init.params, 0.5 ** (len(pyramid) - 1))
    else:
        # no caller seed: coarse cross-correlation picks the starting shift
        cr, cv, cm = pyramid[-1]
        dx, dy = _xcorr_translation(cr, cv, cm)
        params = identity_warp(kind).params
        if kind == "translation":
            params[:] = (dx, dy)
        elif kind == "euclidean":
            params[1:] = (dx, dy)
        else:
            params[2], params[5] = dx, dy
    total_iter = 0
    converged = False
    rho = -1.0
    history: list[float] = []
    for depth, (r, v, mk) in enumerate(reversed(pyramid)):
        if depth > 0:
            params = _scale_translation(kind, params, 2.0)
        params, rho, iters, converged, history = _ecc_level(r, v, kind, params, mk, cfg)
        total_iter += iters
    return EccResult(warp=WarpModel(kind, params), rho=rho, iterations=total_iter, converged=converged, rho_history=history)


# ---------------------------------------------------------------------------
# whole-sequence stabilization
# ---------------------------------------------------------------------------

@dataclass
class StabilizationResult:
    precool: EccResult
    frames: list[EccResult]  # one per video frame; frame 0 is the identity
    review_required: bool


def _compose(outer: WarpModel, inner: WarpModel) -> WarpModel:
    """Sampling-map composition: x -> outer(inner(x)), returned as affine."""
    mo, mi = outer.matrix(), inner.matrix()
    a = mo[:, :2] @ mi[:, :2]
    t = mo[:, :2] @ mi[:, 2] + mo[:, 2]
    return warp_from_matrix("affine", [[a[0, 0], a[0, 1], t[0]], [a[1, 0], a[1, 1], t[1]]])


def stabilize_sequence(
    sequence: ThermalSequence,
    mask=None,
    kind: str = "euclidean",
    precool_kind: str = "affine",
    config: EccConfig | None = None,
) -> StabilizationResult:
    """Align every frame (and the precool image) to frame 0.

    Each frame's solution seeds the next frame's solver — initialization
    only, never a substitute for the per-frame solve. A video-frame
    correlation below 0.9 flags the case for technician review.

    The precool image is solved against the *last* video frame — by then
    the cooling has largely worn off, so the two images actually resemble
    each other — and the result is composed with that frame's warp to yield
    the precool→frame0 map. That solve correlates only the warm skin: the
    cooled patch exists in the anchor but not in the precool image, and
    letting it into the support drags the optimizer toward spurious warps
    that map skin texture onto the cold disk. The precool row's rho reports
    the solved alignment (against the late anchor), not the frame-0
    correlation, which is structurally depressed by the cold disk's
    presence.
    """
    cfg = config or EccConfig()
    ref = sequence.frames[0]
    results = [EccResult(warp=identity_warp(kind), rho=1.0, iterations=0, converged=True)]
    prev = results[0].warp
    for idx, frame in enumerate(sequence.frames[1:], start=1):
        try:
            res = ecc_align(ref, frame, kind=kind, mask=mask, config=cfg, init=prev)
        except (Diverged, FlatImage) as exc:
            exc.frame_index = idx
            raise
        results.append(res)
        prev = res.warp
    anchor_idx = len(sequence.frames) - 1
    anchor = np.asarray(sequence.frames[anchor_idx].temps, dtype=np.float64)
    warm = anchor >= otsu_threshold(anchor)
    if warm.sum() < 0.25 * warm.size:  # unimodal image; the split is noise
        warm = np.ones_like(warm)
    pre_mask = warm if mask is None else warm & np.asarray(mask, dtype=bool)
    try:
        solved = ecc_align(sequence.frames[anchor_idx], sequence.precool, kind=precool_kind, mask=pre_mask, config=cfg)
    except (Diverged, FlatImage) as exc:
        exc.frame_index = -1
        raise
    pre = EccResult(
        warp=_compose(solved.warp, results[anchor_idx].warp),
        rho=solved.rho,
        iterations=solved.iterations,
        converged=solved.converged,
        rho_history=solved.rho_history,
    )
    review = any(r.rho < REVIEW_RHO for r in results)
    return StabilizationResult(precool=pre, frames=results, review_required=review)


def transport_point(stab: StabilizationResult, point) -> tuple[float, float]:
    """Carry a precool-image position into frame-0 coordinates."""
    return apply_warp_to_point(stab.precool.warp, point, inverse=True)


def transport_polygon(stab: StabilizationResult, polygon) -> list[tuple[float, float]]:
    return [transport_point(stab, p) for p in polygon]


# ---------------------------------------------------------------------------
# warp log persistence
# ---------------------------------------------------------------------------

def _log_row(frame_index: int, res: EccResult) -> dict:
    m = res.warp.matrix()
    return {
        "frame_index": frame_index,
        "kind": res.warp.kind,
        "params": [m[0, 0], m[0, 1], m[0, 2], m[1, 0], m[1, 1], m[1, 2]],
        "rho": res.rho,
        "iterations": res.iterations,
        "converged": res.converged,
    }


def write_warps(stab: StabilizationResult, path) -> None:
    """One JSON object per line: the precool row (frame_index -1) first,
    then every video frame in order."""
    rows = [_log_row(-1, stab.precool)] + [_log_row(i, r) for i, r in enumerate(stab.frames)]
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_warps(path) -> StabilizationResult:
    try:
        with open(path, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    pre, frames = None, {}
    for row in rows:
        res = EccResult(
            warp=warp_from_matrix(row["kind"], row["params"]),
            rho=float(row["rho"]),
            iterations=int(row["iterations"]),
            converged=bool(row["converged"]),
        )
        if row["frame_index"] == -1:
            pre = res
        else:
            frames[int(row["frame_index"])] = res
    if pre is None or sorted(frames) != list(range(len(frames))):
        raise IoFailure(f"{path}: incomplete warp log")
    ordered = [frames[i] for i in range(len(frames))]
    review = any(r.rho < REVIEW_RHO for r in ordered)
    return StabilizationResult(precool=pre, frames=ordered, review_required=review)
