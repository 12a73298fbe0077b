"""Hand-crafted features from nucleus probability maps.

Per nucleus channel (Normal, Lymphocyte, Malignant, in that order) the vector
holds, in this order:

* area and activation above each of 7 thresholds (0.02 ... 0.5),
* blob count and summed blob-center activation at each of 6 thresholds,
* total activation of the channel,

giving 3 * (7*2 + 6*2 + 1) = 81 columns.

Blobs come from a single-scale, scale-normalized Laplacian of Gaussian whose
sigma is matched to the 15 px nucleus disk (a normalized LoG peaks on a disk of
radius r at sigma = r / sqrt(2)). Thresholds gate on the map value at the blob
center, not on the filter response.

Activation sums are computed exactly (correctly rounded), so they do not
depend on summation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np
from scipy.spatial import cKDTree

from .pmap import NUCLEUS_CHANNELS, PixelMap

SCHEMA_VERSION = "cf81-v1"
AREA_THRESHOLDS = (0.02, 0.04, 0.08, 0.16, 0.24, 0.32, 0.5)
BLOB_THRESHOLDS = (0.02, 0.04, 0.08, 0.16, 0.24, 0.5)
PER_CHANNEL = 2 * len(AREA_THRESHOLDS) + 2 * len(BLOB_THRESHOLDS) + 1
N_FEATURES = len(NUCLEUS_CHANNELS) * PER_CHANNEL
DEFAULT_SIGMA = 15 / (2 * math.sqrt(2))
TRUNCATE = 4.0

_MANTISSA_SCALE = float(2 ** 24)
_EXP_OFFSET = 150  # frexp exponents of float32 values lie in [-148, 128]
_N_EXP = 280


def feature_schema() -> list:
    """Column descriptors ``{"name", "channel", "family", "threshold"}`` in canonical order."""
    cols = []
    for channel in NUCLEUS_CHANNELS:
        for t in AREA_THRESHOLDS:
            cols.append({"channel": channel, "family": "area", "threshold": t})
            cols.append({"channel": channel, "family": "activation", "threshold": t})
        for t in BLOB_THRESHOLDS:
            cols.append({"channel": channel, "family": "blob_count", "threshold": t})
            cols.append({"channel": channel, "family": "blob_activation", "threshold": t})
        cols.append({"channel": channel, "family": "total_activation", "threshold": None})
    for i, col in enumerate(cols):
        col["name"] = f"f{i:03d}"
    return cols


def feature_names() -> list:
    return [c["name"] for c in feature_schema()]


def describe_feature(index: int) -> str:
    col = feature_schema()[index]
    if col["threshold"] is None:
        return f"{col['channel']}:{col['family']}"
    return f"{col['channel']}:{col['family']}@{col['threshold']:g}"


def _as_plane(x) -> np.ndarray:
    if isinstance(x, PixelMap):
        if len(x.channels) != 1:
            raise ValueError(f"expected a single-channel map, got {list(x.channels)}")
        x = x.data[0]
    return np.asarray(x, dtype=np.float32)


def _binned_exact_sums(values: np.ndarray, bins: np.ndarray, n_bins: int) -> list:
    """Correctly rounded sum of float32 ``values`` within each bin.

    Each value is split into a 24-bit integer mantissa and an exponent;
    mantissas are accumulated per (bin, exponent) as integers, which float64
    holds exactly for up to 2**29 values, and the few partial sums are
    combined with ``math.fsum``.
    """
    mant, exp = np.frexp(values)
    key = bins.astype(np.intp) * _N_EXP + (exp + _EXP_OFFSET)
    acc = np.bincount(key, weights=mant.astype(np.float64) * _MANTISSA_SCALE,
                      minlength=n_bins * _N_EXP).reshape(n_bins, _N_EXP)
    shifts = np.arange(_N_EXP) - _EXP_OFFSET - 24
    out = []
    for row in acc:
        nz = np.flatnonzero(row)
        out.append(math.fsum(math.ldexp(float(row[k]), int(shifts[k])) for k in nz))
    return out


def exact_sum(values) -> float:
    v = np.ascontiguousarray(values, dtype=np.float32).ravel()
    return _binned_exact_sums(v, np.zeros(v.shape, np.intp), 1)[0]


def _threshold_table(plane: np.ndarray, thresholds) -> tuple:
    """Areas and activations at ascending ``thresholds`` plus the total activation."""
    v = plane.ravel()
    level = np.zeros(v.shape, dtype=np.int8)
    for t in thresholds:
        level += v >= np.float64(t)
    n = len(thresholds) + 1
    counts = np.bincount(level, minlength=n)
    sums = _binned_exact_sums(v, level, n)
    areas, acts = [], []
    for j in range(1, n):
        areas.append(int(counts[j:].sum()))
        acts.append(math.fsum(sums[j:]))
    return areas, acts, math.fsum(sums)


def threshold_stats(plane, t: float) -> tuple:
    """``(area, activation)``: pixel count and summed value over pixels with value >= t."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    areas, acts, _ = _threshold_table(_as_plane(plane), (t,))
    return areas[0], acts[0]


def total_activation(plane) -> float:
    return exact_sum(_as_plane(plane))


@dataclass(frozen=True)
class Blob:
    cx: float
    cy: float
    response: float
    center_activation: float


def kernel_radius(sigma: float) -> int:
    return int(TRUNCATE * sigma + 0.5)


def log_response(plane, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Scale-normalized negative Laplacian of the Gaussian-smoothed map.

    Smoothing uses a Gaussian truncated at 4 sigma and the Laplacian the
    5-point stencil; both reflect at the border (``dcba|abcd``).
    """
    plane = _as_plane(plane)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = kernel_radius(sigma)
    if 2 * radius + 1 > min(plane.shape):
        raise ValueError(
            f"LoG kernel of {2 * radius + 1} px (sigma={sigma:g}) exceeds the {plane.shape[1]}x{plane.shape[0]} map")
    smooth = cv2.GaussianBlur(plane, (2 * radius + 1, 2 * radius + 1), sigmaX=sigma, sigmaY=sigma,
                              borderType=cv2.BORDER_REFLECT)
    lap = cv2.Laplacian(smooth, cv2.CV_32F, ksize=1, borderType=cv2.BORDER_REFLECT)
    return lap * np.float32(-sigma * sigma)


def _strict_local_maxima(resp: np.ndarray) -> tuple:
    """Rows and columns of positive pixels strictly greater than all 8 neighbours."""
    padded = np.pad(resp, 1, mode="constant", constant_values=-np.inf)
    h, w = resp.shape
    peak = resp > 0
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            if dy == 1 and dx == 1:
                continue
            peak &= resp > padded[dy:dy + h, dx:dx + w]
    return np.nonzero(peak)


def _refine(resp, r, c):
    """Sub-pixel offset from a parabola through the peak and its two neighbours, per axis."""
    h, w = resp.shape

    def offset(lo, mid, hi):
        curv = lo - 2.0 * mid + hi
        return 0.0 if curv >= 0 else float(np.clip(0.5 * (lo - hi) / curv, -0.5, 0.5))

    dy = offset(float(resp[r - 1, c]), float(resp[r, c]), float(resp[r + 1, c])) if 0 < r < h - 1 else 0.0
    dx = offset(float(resp[r, c - 1]), float(resp[r, c]), float(resp[r, c + 1])) if 0 < c < w - 1 else 0.0
    return c + dx, r + dy


def _peaks(plane: np.ndarray, sigma: float) -> tuple:
    """Suppressed LoG maxima as ``(rows, cols, response, resp_image)``, strongest first.

    A maximum is dropped when a kept, stronger one lies within ``sigma``;
    equal responses are ordered by row, then column.
    """
    resp = log_response(plane, sigma)
    rows, cols = _strict_local_maxima(resp)
    strength = resp[rows, cols]
    order = np.lexsort((cols, rows, -strength.astype(np.float64)))
    rows, cols, strength = rows[order], cols[order], strength[order]
    if rows.size > 1:
        pairs = cKDTree(np.column_stack([rows, cols])).query_pairs(sigma, output_type="ndarray")
        keep = np.ones(rows.size, dtype=bool)
        if pairs.size:
            # pair (i, j) with i < j: i is the stronger one
            pairs = np.sort(pairs, axis=1)
            stronger = [[] for _ in range(rows.size)]
            for i, j in pairs[np.argsort(pairs[:, 1], kind="stable")]:
                stronger[j].append(i)
            for j in np.unique(pairs[:, 1]):
                if any(keep[i] for i in stronger[j]):
                    keep[j] = False
        rows, cols, strength = rows[keep], cols[keep], strength[keep]
    return rows, cols, strength, resp


def detect_blobs(plane, sigma: float = DEFAULT_SIGMA) -> list:
    """All LoG blobs of a map before any activation gating, strongest first."""
    plane = _as_plane(plane)
    rows, cols, strength, resp = _peaks(plane, sigma)
    blobs = []
    for r, c, s in zip(rows.tolist(), cols.tolist(), strength.tolist()):
        cx, cy = _refine(resp, r, c)
        blobs.append(Blob(cx, cy, s, float(plane[r, c])))
    return blobs


def log_blobs(plane, t: float, sigma: float = DEFAULT_SIGMA) -> list:
    """Blobs whose center activation is at least ``t``."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return [b for b in detect_blobs(plane, sigma) if b.center_activation >= t]


def channel_features(plane, sigma: float = DEFAULT_SIGMA) -> list:
    """The 27 per-channel features in canonical order."""
    plane = _as_plane(plane)
    areas, acts, total = _threshold_table(plane, AREA_THRESHOLDS)
    out = []
    for a, s in zip(areas, acts):
        out += [float(a), s]
    rows, cols, _, _ = _peaks(plane, sigma)
    centers = plane[rows, cols]
    for t in BLOB_THRESHOLDS:
        picked = centers[centers >= np.float64(t)]
        out += [float(picked.size), math.fsum(picked.tolist())]
    out.append(total)
    return out


def extract_features(pmap: PixelMap, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """81-element float64 feature vector of a map; Background is ignored."""
    missing = [c for c in NUCLEUS_CHANNELS if c not in pmap]
    if missing:
        raise ValueError(f"map lacks nucleus channel(s) {missing}")
    values = []
    for name in NUCLEUS_CHANNELS:
        values += channel_features(pmap.channel(name), sigma)
    return np.array(values, dtype=np.float64)
