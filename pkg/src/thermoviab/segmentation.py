"""Cooled-region segmentation: classical threshold method and a small
trainable encoder-decoder.

The classical path thresholds the first post-cooling frame with Otsu's
method, keeps the largest 8-connected cold component, then applies one pass
of 3x3 morphological closing and hole filling. It is the default because it
needs no training data.

The trainable variant is a 3-stage encoder-decoder of 3x3 convolutions
(stride-2 downsampling, nearest-neighbor upsampling, per-stage skip
connections) ending in a per-pixel logistic output. Forward, backward, and
the Adam optimizer are implemented directly in numpy in double precision so
parameter gradients are exactly checkable against finite differences.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (
    DimensionMismatch,
    EmptyDataset,
    IoFailure,
    NoColdRegion,
    NonFiniteLoss,
)
from .io import RoiMask

MIN_COLD_PIXELS = 100

CHECKPOINT_MAGIC = b"TVSN"


# ---------------------------------------------------------------------------
# classical path
# ---------------------------------------------------------------------------

def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Histogram threshold maximizing between-class variance."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return lo
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2.0
    p = hist.astype(np.float64) / hist.sum()
    w0 = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_total = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_total * w0 - mu) ** 2 / (w0 * (1.0 - w0))
    between[~np.isfinite(between)] = -1.0
    return float(centers[int(np.argmax(between))])


def _postprocess(cold: np.ndarray) -> np.ndarray:
    """Largest 8-connected component, one 3x3 closing pass, hole fill."""
    labels, count = ndimage.label(cold, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return np.zeros_like(cold, dtype=bool)
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1))
    keep = labels == (1 + int(np.argmax(sizes)))
    closed = ndimage.binary_closing(keep, structure=np.ones((3, 3), dtype=bool))
    # closing must never lose the component itself
    closed |= keep
    return ndimage.binary_fill_holes(closed)


def segment_cold_region(frame0) -> RoiMask:
    """Threshold-based ROI mask from the first post-cooling frame."""
    img = np.asarray(getattr(frame0, "temps", frame0), dtype=np.float64)
    thr = otsu_threshold(img)
    cold = img < thr
    labels, count = ndimage.label(cold, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        raise NoColdRegion("no pixels below the threshold")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1))
    if sizes.max() < MIN_COLD_PIXELS:
        raise NoColdRegion(f"largest cold component has {int(sizes.max())} px (< {MIN_COLD_PIXELS})")
    return RoiMask(_postprocess(cold))


def dice(a: RoiMask, b: RoiMask) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks count as a perfect match."""
    pa = np.asarray(getattr(a, "pixels", a)).astype(bool)
    pb = np.asarray(getattr(b, "pixels", b)).astype(bool)
    if pa.shape != pb.shape:
        raise DimensionMismatch(f"mask shapes differ: {pa.shape} vs {pb.shape}")
    total = int(pa.sum()) + int(pb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pa & pb).sum()) / total


# ---------------------------------------------------------------------------
# tensor ops (double precision, explicit gradients)
# ---------------------------------------------------------------------------

def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    """3x3 convolution with padding 1; x is (C_in, H, W)."""
    _, h, width = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ho = (h - 1) // stride + 1
    wo = (width - 1) // stride + 1
    out = np.zeros((w.shape[0], ho, wo))
    for di in range(3):
        for dj in range(3):
            patch = xp[:, di : di + (ho - 1) * stride + 1 : stride, dj : dj + (wo - 1) * stride + 1 : stride]
            out += np.tensordot(w[:, :, di, dj], patch, axes=(1, 0))
    return out + b[:, None, None]


def _conv_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int):
    """Gradients of the conv output w.r.t. (x, w, b) given upstream g."""
    _, h, width = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    _, ho, wo = g.shape
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for di in range(3):
        for dj in range(3):
            sl_i = slice(di, di + (ho - 1) * stride + 1, stride)
            sl_j = slice(dj, dj + (wo - 1) * stride + 1, stride)
            patch = xp[:, sl_i, sl_j]
            dw[:, :, di, dj] = np.tensordot(g, patch, axes=([1, 2], [1, 2]))
            dxp[:, sl_i, sl_j] += np.tensordot(w[:, :, di, dj], g, axes=(0, 0))
    db = g.sum(axis=(1, 2))
    return dxp[:, 1 : 1 + h, 1 : 1 + width], dw, db


def _upsample(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample_backward(g: np.ndarray) -> np.ndarray:
    c, h, w = g.shape
    return g.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def pad_to_multiple(img: np.ndarray, multiple: int = 8) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = img.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    return np.pad(img, ((0, ph), (0, pw)), mode="edge"), (h, w)


def standardize_frame(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    std = float(img.std())
    return (img - img.mean()) / max(std, 1e-6)


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

LAYER_ORDER = ("enc1", "enc2", "enc3", "dec3", "dec2", "dec1")


class SegmenterNet:
    """3-stage encoder-decoder over a single standardized frame.

    Encoder stages halve the grid (stride-2 conv + ReLU); decoder stages
    upsample, concatenate the matching encoder activation (the raw input at
    the finest stage) and convolve. The final conv emits one logit per
    pixel. He-uniform initialization, fixed seed.
    """

    def __init__(self, widths=(8, 16, 32), seed: int = 0):
        self.widths = tuple(int(w) for w in widths)
        self.seed = int(seed)
        w1, w2, w3 = self.widths
        rng = np.random.default_rng(self.seed)
        self.params: dict[str, np.ndarray] = {}
        for name, c_out, c_in in (
            ("enc1", w1, 1),
            ("enc2", w2, w1),
            ("enc3", w3, w2),
            ("dec3", w2, w3 + w2),
            ("dec2", w1, w2 + w1),
            ("dec1", 1, w1 + 1),
        ):
            bound = math.sqrt(6.0 / (c_in * 9))
            self.params[f"{name}.w"] = rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3))
            self.params[f"{name}.b"] = np.zeros(c_out)

    def forward(self, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        """Logit map for standardized input x of shape (H, W), H and W
        multiples of 8."""
        p = self.params
        x3 = x[None, :, :]
        e1 = np.maximum(_conv_forward(x3, p["enc1.w"], p["enc1.b"], 2), 0.0)
        e2 = np.maximum(_conv_forward(e1, p["enc2.w"], p["enc2.b"], 2), 0.0)
        e3 = np.maximum(_conv_forward(e2, p["enc3.w"], p["enc3.b"], 2), 0.0)
        c3 = np.concatenate([_upsample(e3), e2], axis=0)
        d3 = np.maximum(_conv_forward(c3, p["dec3.w"], p["dec3.b"], 1), 0.0)
        c2 = np.concatenate([_upsample(d3), e1], axis=0)
        d2 = np.maximum(_conv_forward(c2, p["dec2.w"], p["dec2.b"], 1), 0.0)
        c1 = np.concatenate([_upsample(d2), x3], axis=0)
        z = _conv_forward(c1, p["dec1.w"], p["dec1.b"], 1)
        if cache is not None:
            cache.update(x3=x3, e1=e1, e2=e2, e3=e3, c3=c3, d3=d3, c2=c2, d2=d2, c1=c1)
        return z[0]

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray):
        """Mean per-pixel binary cross-entropy and its parameter gradients.

        The loss is computed from the probabilities themselves, so a wildly
        divergent model genuinely produces an infinite loss.
        """
        p = self.params
        cache: dict = {}
        z = self.forward(x, cache)
        prob = _sigmoid(z)
        yf = np.asarray(y, dtype=np.float64)
        with np.errstate(divide="ignore"):
            pixel_loss = np.where(yf > 0.5, -np.log(prob), -np.log(1.0 - prob))
        loss = float(pixel_loss.mean())
        n = z.size
        dz = ((prob - yf) / n)[None, :, :]

        grads: dict[str, np.ndarray] = {}

        def conv_back(name, g, inp, stride):
            dx, dw, db = _conv_backward(g, inp, p[f"{name}.w"], stride)
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
            return dx

        w1, w2, w3 = self.widths
        dc1 = conv_back("dec1", dz, cache["c1"], 1)
        dd2 = _upsample_backward(dc1[:w1]) * (cache["d2"] > 0)
        dc2 = conv_back("dec2", dd2, cache["c2"], 1)
        dd3 = _upsample_backward(dc2[:w2]) * (cache["d3"] > 0)
        dc3 = conv_back("dec3", dd3, cache["c3"], 1)
        de3 = _upsample_backward(dc3[:w3]) * (cache["e3"] > 0)
        de2 = (conv_back("enc3", de3, cache["e2"], 2) + dc3[w3:]) * (cache["e2"] > 0)
        de1 = (conv_back("enc2", de2, cache["e1"], 2) + dc2[w2:]) * (cache["e1"] > 0)
        conv_back("enc1", de1, cache["x3"], 2)
        return loss, grads

    def predict_proba(self, frame) -> np.ndarray:
        """Per-pixel probabilities on the original grid."""
        img = np.asarray(getattr(frame, "temps", frame), dtype=np.float64)
        padded, (h, w) = pad_to_multiple(standardize_frame(img))
        z = self.forward(padded)
        return _sigmoid(z)[:h, :w]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    epochs: int = 50
    seed: int = 0
    widths: tuple = (8, 16, 32)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.eps <= 0 or self.batch_size <= 0:
            raise ValueError("learning_rate, eps, and batch_size must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam moment decays must lie in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        for k in params:
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            mhat = self.m[k] / (1 - c.beta1**self.t)
            vhat = self.v[k] / (1 - c.beta2**self.t)
            params[k] -= c.learning_rate * mhat / (np.sqrt(vhat) + c.eps)


def _prepare_dataset(dataset):
    if not dataset:
        raise EmptyDataset("training needs at least one (frame, mask) pair")
    prepared = []
    shape = None
    for frame, mask in dataset:
        img = np.asarray(getattr(frame, "temps", frame), dtype=np.float64)
        m = np.asarray(getattr(mask, "pixels", mask)).astype(np.float64)
        if img.shape != m.shape:
            raise DimensionMismatch(f"frame {img.shape} vs mask {m.shape}")
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DimensionMismatch(f"all frames must share one size; got {img.shape} and {shape}")
        x, _ = pad_to_multiple(standardize_frame(img))
        y, _ = pad_to_multiple(m)
        prepared.append((x, y))
    return prepared


def train_segmenter(dataset, cfg: TrainConfig | None = None) -> SegmenterNet:
    """Adam on mean per-pixel binary cross-entropy; deterministic per seed.

    Epoch losses over the full dataset are recorded on ``net.epoch_losses``.
    Zero epochs returns the untouched initialization.
    """
    cfg = cfg or TrainConfig()
    prepared = _prepare_dataset(dataset)
    net = SegmenterNet(widths=cfg.widths, seed=cfg.seed)
    opt = Adam(net.params, cfg)
    shuffle = np.random.default_rng([cfg.seed, 1])
    net.epoch_losses = []
    for _ in range(cfg.epochs):
        order = shuffle.permutation(len(prepared))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            total: dict[str, np.ndarray] = {}
            batch_loss = 0.0
            for idx in batch:
                x, y = prepared[idx]
                loss, grads = net.loss_and_grads(x, y)
                batch_loss += loss
                for k, g in grads.items():
                    total[k] = total.get(k, 0.0) + g
            if not math.isfinite(batch_loss):
                raise NonFiniteLoss(f"training loss became {batch_loss}")
            opt.step(net.params, {k: g / len(batch) for k, g in total.items()})
        epoch_loss = 0.0
        for x, y in prepared:
            loss, _ = net.loss_and_grads(x, y)
            epoch_loss += loss
        epoch_loss /= len(prepared)
        if not math.isfinite(epoch_loss):
            raise NonFiniteLoss(f"training loss became {epoch_loss}")
        net.epoch_losses.append(epoch_loss)
    return net


def infer_mask(net: SegmenterNet, frame) -> RoiMask:
    """Probability >= 0.5, then the classical post-processing; an empty
    result is a valid (empty) mask rather than an error."""
    prob = net.predict_proba(frame)
    binary = prob >= 0.5
    if not binary.any():
        return RoiMask(np.zeros_like(binary))
    return RoiMask(_postprocess(binary))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: SegmenterNet, path) -> None:
    """Binary: magic, uint32 header length, JSON header, tensors as
    little-endian float32 in header order."""
    names = sorted(net.params)
    header = {
        "format": 1,
        "widths": list(net.widths),
        "seed": net.seed,
        "tensors": [{"name": n, "shape": list(net.params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for n in names:
                fh.write(np.ascontiguousarray(net.params[n], dtype="<f4").tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_checkpoint(path) -> SegmenterNet:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if raw[:4] != CHECKPOINT_MAGIC:
        raise IoFailure(f"{path}: not a segmenter checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    net = SegmenterNet(widths=header["widths"], seed=header["seed"])
    pos = 8 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape)
        net.params[entry["name"]] = arr.astype(np.float64)
        pos += count * 4
    return net
