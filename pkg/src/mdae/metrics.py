"""Reconstruction quality metrics: PSNR, SSIM, edge sharpness/width, histogram matching, dice."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, ShapeError


def _same_shape(a, b, op):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{op}: shapes differ, {np.shape(a)} vs {np.shape(b)}")


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    _same_shape(a, b, "psnr")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = np.mean(np.square(np.asarray(a, np.float64) - np.asarray(b, np.float64)))
    if err == 0:
        return math.inf
    return float(10 * np.log10(data_range ** 2 / err))


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _gauss_kernel(size=SSIM_WIN, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _ssim_2d(a, b, data_range):
    k = _gauss_kernel()

    def blur(img):
        img = ndimage.correlate1d(img, k, axis=0, mode="reflect")
        return ndimage.correlate1d(img, k, axis=1, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    s_aa = blur(a * a) - mu_a * mu_a
    s_bb = blur(b * b) - mu_b * mu_b
    s_ab = blur(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (s_aa + s_bb + c2)
    smap = num / den
    p = (SSIM_WIN - 1) // 2
    return float(smap[p:-p, p:-p].mean())


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5). Volumes average their slices."""
    _same_shape(a, b, "ssim")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape[-2] < SSIM_WIN or a.shape[-1] < SSIM_WIN:
        raise ContractError(f"ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape[-2:]}")
    if np.array_equal(a, b):
        return 1.0
    if a.ndim == 2:
        return _ssim_2d(a, b, data_range)
    flat_a = a.reshape(-1, *a.shape[-2:])
    flat_b = b.reshape(-1, *b.shape[-2:])
    return float(np.mean([_ssim_2d(x, y, data_range) for x, y in zip(flat_a, flat_b)]))


# --------------------------------------------------------------------------
# edge profile statistics
# --------------------------------------------------------------------------

def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    values = np.asarray(values, np.float64).ravel()
    lo, hi = values.min(), values.max()
    if hi == lo:
        return float(lo)
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    m0 = s0 / np.maximum(w0, 1)
    m1 = (s0[-1] - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    return float(edges[np.argmax(between[:-1]) + 1])


# unit steps for the 8 quantized gradient directions, k * 45 degrees
_DIRS = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]


@dataclass
class EdgeStats:
    sharpness: float
    edge_width: float
    edge_pixels: int
    empty: bool = False


def _trace(img, y, x, dy, dx, rising):
    h, w = img.shape
    while True:
        ny, nx = y + dy, x + dx
        if not (0 <= ny < h and 0 <= nx < w):
            return y, x
        if (img[ny, nx] > img[y, x]) if rising else (img[ny, nx] < img[y, x]):
            y, x = ny, nx
        else:
            return y, x


def edge_profile_stats(img: np.ndarray, mask: np.ndarray | None = None) -> EdgeStats:
    """Sharpness and normalized edge width of a 2-D image.

    Edge pixels are Sobel-magnitude pixels above the Otsu threshold inside
    ``mask``. From each, the intensity profile is walked along the quantized
    gradient direction to the nearest local extrema on both sides; the edge
    width is the distance between the last sample at or below the 10% level
    and the first at or above the 90% level (so an ideal step is exactly one
    pixel wide). ``edge_width`` is the mean width divided by the image
    diagonal; ``sharpness`` is the mean of ``(I_max - I_min) / width``.
    """
    img = np.asarray(img, np.float64)
    if img.ndim != 2:
        raise ShapeError(f"edge_profile_stats works on 2-D images, got {img.shape}")
    if mask is None:
        mask = np.ones(img.shape, bool)
    mask = np.asarray(mask, bool)
    _same_shape(img, mask, "edge_profile_stats")
    if not mask.any():
        raise ContractError("edge_profile_stats needs a non-empty mask")
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    vals = mag[mask]
    edges = np.zeros_like(mask)
    if vals.max() > 0:
        edges = (mag > otsu_threshold(vals)) & mask
    ys, xs = np.nonzero(edges)
    widths, slopes = [], []
    for y, x in zip(ys, xs):
        k = int(np.round(np.arctan2(gy[y, x], gx[y, x]) / (np.pi / 4))) % 8
        dy, dx = _DIRS[k]
        y1, x1 = _trace(img, y, x, dy, dx, rising=True)
        y0, x0 = _trace(img, y, x, -dy, -dx, rising=False)
        lo_v, hi_v = img[y0, x0], img[y1, x1]
        delta = hi_v - lo_v
        if delta <= 0:
            continue
        n = max(abs(y1 - y0), abs(x1 - x0))
        prof = img[y0 + dy * np.arange(n + 1), x0 + dx * np.arange(n + 1)]
        lo_i = np.nonzero(prof <= lo_v + 0.1 * delta)[0].max()
        hi_i = np.nonzero(prof >= lo_v + 0.9 * delta)[0].min()
        width = (hi_i - lo_i) * math.hypot(dy, dx)
        widths.append(width)
        slopes.append(delta / width)
    if not widths:
        warnings.warn("no edge pixels found; reporting zero sharpness and width", RuntimeWarning, stacklevel=2)
        return EdgeStats(0.0, 0.0, 0, empty=True)
    diag = math.hypot(*img.shape)
    return EdgeStats(float(np.mean(slopes)), float(np.mean(widths) / diag), len(widths))


# --------------------------------------------------------------------------
# histogram matching
# --------------------------------------------------------------------------

def histogram_match(src: np.ndarray, ref: np.ndarray, bins: int = 256) -> np.ndarray:
    """Map ``src`` intensities onto the distribution of ``ref`` (both in [0, 1]).

    Each source value goes through the source's empirical CDF (mid-rank, so
    ties share a quantile) and then through the inverse of the binned
    reference CDF, linear inside each occupied reference bin.
    """
    src = np.asarray(src)
    s = src.ravel().astype(np.float64)
    uniq, inv, cnt = np.unique(s, return_inverse=True, return_counts=True)
    below = np.cumsum(cnt) - cnt
    q = ((below + cnt / 2) / s.size)[inv]

    hist, edges = np.histogram(np.asarray(ref, np.float64).ravel(), bins=bins, range=(0.0, 1.0))
    cdf = np.concatenate([[0.0], np.cumsum(hist) / hist.sum()])
    occupied = np.nonzero(hist)[0]
    f_lo, f_hi = cdf[occupied], cdf[occupied + 1]
    j = np.clip(np.searchsorted(f_hi, q, side="right"), 0, occupied.size - 1)
    b = occupied[j]
    frac = np.clip((q - f_lo[j]) / (f_hi[j] - f_lo[j]), 0.0, 1.0)
    out = edges[b] + frac * (edges[b + 1] - edges[b])
    return out.reshape(src.shape).astype(src.dtype if src.dtype.kind == "f" else np.float64)


# --------------------------------------------------------------------------
# dice
# --------------------------------------------------------------------------

def dice(label_a: np.ndarray, label_b: np.ndarray, class_id: int) -> float:
    _same_shape(label_a, label_b, "dice")
    a = np.asarray(label_a) == class_id
    b = np.asarray(label_b) == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


# --------------------------------------------------------------------------
# per-volume evaluation and reports
# --------------------------------------------------------------------------

SLICE_FIELDS = ("psnr", "ssim", "sharpness", "edge_width")


@dataclass
class SliceMetrics:
    subject: str
    slice: int
    psnr: float
    ssim: float
    sharpness: float
    edge_width: float
    edge_empty: bool = False


@dataclass
class VolumeMetrics:
    subject: str
    slices: list[SliceMetrics]
    dice: dict[int, float] = field(default_factory=dict)

    def mean(self, name: str) -> float:
        return float(np.mean([getattr(s, name) for s in self.slices]))


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, np.float64)
    mean = float(np.mean(v))
    if np.all(np.isfinite(v)):
        return mean, float(np.std(v))
    return mean, 0.0 if np.all(v == v[0]) else math.nan


@dataclass
class MetricReport:
    volumes: list[VolumeMetrics] = field(default_factory=list)

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """Per-volume means, summarized as (mean, std) across volumes."""
        out = {name: _mean_std([v.mean(name) for v in self.volumes]) for name in SLICE_FIELDS}
        classes = sorted({c for v in self.volumes for c in v.dice})
        for c in classes:
            out[f"dice_{c}"] = _mean_std([v.dice[c] for v in self.volumes if c in v.dice])
        return out

    def to_json(self) -> str:
        doc = {
            "slices": [
                {**{k: _num(getattr(s, k)) for k in SLICE_FIELDS},
                 "subject": s.subject, "slice": s.slice, "edge_empty": s.edge_empty}
                for v in self.volumes for s in v.slices
            ],
            "volumes": [
                {"subject": v.subject, **{k: _num(v.mean(k)) for k in SLICE_FIELDS},
                 "dice": {str(c): _num(d) for c, d in v.dice.items()}}
                for v in self.volumes
            ],
            "aggregate": {k: {"mean": _num(m), "std": _num(s)} for k, (m, s) in self.aggregate().items()},
        }
        return json.dumps(doc, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("subject", "slice") + SLICE_FIELDS)
        for v in self.volumes:
            for s in v.slices:
                w.writerow([s.subject, s.slice] + [_num(getattr(s, k)) for k in SLICE_FIELDS])
        return buf.getvalue()


def _num(x: float):
    """JSON/CSV-safe float: non-finite values become the strings 'inf', '-inf', 'nan'."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def evaluate_volume(
    pred: np.ndarray,
    truth: np.ndarray,
    lf_ref: np.ndarray | None = None,
    *,
    apply_hm: bool = False,
    subject: str = "",
    slice_ids=None,
    original_range: tuple[float, float] | None = None,
    pred_labels: np.ndarray | None = None,
    truth_labels: np.ndarray | None = None,
    classes=(1, 2, 3),
) -> VolumeMetrics:
    """Metrics for one (slices, h, w) volume pair in normalized [0, 1] units.

    With ``apply_hm`` the prediction is first histogram-matched to ``lf_ref``.
    Edge statistics use the non-background mask ``truth > 0`` and are computed
    on the prediction rescaled to ``original_range`` when given.
    """
    _same_shape(pred, truth, "evaluate_volume")
    if pred.ndim != 3:
        raise ShapeError(f"evaluate_volume expects (slices, h, w) volumes, got {pred.shape}")
    if apply_hm:
        if lf_ref is None:
            raise ContractError("histogram matching needs the LF reference volume")
        _same_shape(pred, lf_ref, "evaluate_volume")
        pred = histogram_match(pred, lf_ref)
    lo, hi = original_range if original_range is not None else (0.0, 1.0)
    ids = list(slice_ids) if slice_ids is not None else list(range(len(pred)))
    rows = []
    for z, sid in enumerate(ids):
        mask = truth[z] > 0
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            es = (edge_profile_stats(pred[z] * (hi - lo) + lo, mask) if mask.any()
                  else EdgeStats(0.0, 0.0, 0, empty=True))
        rows.append(SliceMetrics(
            subject, sid, psnr(pred[z], truth[z]), ssim(pred[z], truth[z]),
            es.sharpness, es.edge_width, es.empty or bool(caught),
        ))
    dices = {}
    if pred_labels is not None and truth_labels is not None:
        dices = {int(c): dice(pred_labels, truth_labels, c) for c in classes}
    return VolumeMetrics(subject, rows, dices)
