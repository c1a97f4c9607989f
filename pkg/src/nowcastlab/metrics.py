"""Radar verification metrics and intensity-unit conversions.

Scores follow forecast-verification conventions: a pixel counts as an
event when its value is >= the threshold (boundary inclusive), and
degenerate denominators score 0 rather than NaN so aggregate tables
stay finite.  Pooled scores max-pool the real-valued fields before
thresholding, forgiving small displacement errors.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

SEVIR_THRESHOLDS = (16.0, 74.0, 133.0, 160.0, 181.0, 219.0)
HKO7_PIXEL_THRESHOLDS = (84, 118, 141, 158, 185)
METEONET_DBZ_THRESHOLDS = (19, 28, 35, 40, 47)
RAIN_RATE_THRESHOLDS = (0.5, 2.0, 5.0, 10.0, 30.0)


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int


def binarize(field: np.ndarray, threshold: float) -> np.ndarray:
    """Event mask: value >= threshold."""
    return np.asarray(field) >= threshold


def confusion_counts(pred: np.ndarray, target: np.ndarray,
                     threshold: float) -> ConfusionCounts:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    p = binarize(pred, threshold)
    t = binarize(target, threshold)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def csi(counts: ConfusionCounts) -> float:
    """Critical success index TP/(TP+FN+FP); 0 when no events anywhere."""
    denom = counts.tp + counts.fn + counts.fp
    return counts.tp / denom if denom > 0 else 0.0


def hss(counts: ConfusionCounts) -> float:
    """Heidke skill score; 0 when the denominator vanishes."""
    tp, fp, tn, fn = counts
    denom = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)
    if denom == 0:
        return 0.0
    return 2.0 * (tp * tn - fn * fp) / denom


def max_pool(field: np.ndarray, pool: int) -> np.ndarray:
    """Max-pool the trailing two axes with kernel = stride = pool.

    Edge windows may be partial (equivalent to padding with the minimum
    representable value), so pooling never invents exceedances.
    """
    if pool < 1:
        raise ValueError(f"pool must be >= 1, got {pool}")
    field = np.asarray(field)
    if pool == 1:
        return field
    if field.ndim < 2:
        raise ValueError(f"need at least 2 axes, got shape {field.shape}")
    h, w = field.shape[-2:]
    out_h = -(-h // pool)
    out_w = -(-w // pool)
    if h % pool or w % pool:
        padded = np.full(field.shape[:-2] + (out_h * pool, out_w * pool),
                         -np.inf, dtype=np.float64)
        padded[..., :h, :w] = field
        field = padded
    shaped = field.reshape(field.shape[:-2] + (out_h, pool, out_w, pool))
    return shaped.max(axis=(-3, -1))


def pooled_csi(pred: np.ndarray, target: np.ndarray, threshold: float,
               pool: int) -> float:
    """Max-pool both fields, then threshold, then CSI; pool=1 is plain CSI."""
    return csi(confusion_counts(max_pool(pred, pool), max_pool(target, pool),
                                threshold))


def csi_mean(pred: np.ndarray, target: np.ndarray,
             thresholds: Sequence[float], pool: int = 1) -> float:
    """Arithmetic mean of per-threshold CSI."""
    if len(thresholds) == 0:
        raise ValueError("need at least one threshold")
    pooled_pred = max_pool(pred, pool)
    pooled_target = max_pool(target, pool)
    return float(np.mean([csi(confusion_counts(pooled_pred, pooled_target, tau))
                          for tau in thresholds]))


def crps_ensemble(members: np.ndarray, target: np.ndarray) -> float:
    """Empirical CRPS averaged over all points.

    Per point: (1/n) sum_i |x_i - y| - (1/(2 n^2)) sum_ij |x_i - x_j|.
    With a single member this is exactly the mean absolute error.
    """
    members = np.asarray(members, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if members.ndim != target.ndim + 1 or members.shape[1:] != target.shape:
        raise ValueError(
            f"members shape {members.shape} does not stack over target {target.shape}")
    n = members.shape[0]
    if n < 1:
        raise ValueError("need at least one ensemble member")
    skill = float(np.mean(np.abs(members - target[None])))
    if n == 1:
        return skill
    spread = 0.0
    for i in range(n):
        for j in range(n):
            spread += float(np.mean(np.abs(members[i] - members[j])))
    return skill - spread / (2.0 * n * n)


def _window_mean(field: np.ndarray, window: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(field, (window, window))
    return view.mean(axis=(-2, -1))


def ssim(pred: np.ndarray, target: np.ndarray, data_range: float = 1.0,
         window: int = 7) -> float:
    """Structural similarity over valid (unpadded) uniform windows.

    Uses C1=(0.01 L)^2, C2=(0.03 L)^2 at L = data_range and population
    (window-mean) moments.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim != 2:
        raise ValueError(f"expected a 2-D field, got shape {pred.shape}")
    if min(pred.shape) < window:
        raise ValueError(f"field {pred.shape} smaller than window {window}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_p = _window_mean(pred, window)
    mu_t = _window_mean(target, window)
    var_p = _window_mean(pred * pred, window) - mu_p ** 2
    var_t = _window_mean(target * target, window) - mu_t ** 2
    cov = _window_mean(pred * target, window) - mu_p * mu_t
    score = ((2.0 * mu_p * mu_t + c1) * (2.0 * cov + c2)
             / ((mu_p ** 2 + mu_t ** 2 + c1) * (var_p + var_t + c2)))
    return float(score.mean())


def sevir_vil_to_rate(x):
    """Byte-scaled vertically-integrated-liquid value -> kg/m^2.

    Piecewise: 0 for x <= 5; (x-2)/90.66 for 5 < x <= 18;
    exp((x-83.9)/38.9) for 18 < x <= 254.
    """
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 254):
        raise ValueError("byte value outside [0, 254]")
    rate = np.where(arr <= 5.0, 0.0,
                    np.where(arr <= 18.0, (arr - 2.0) / 90.66,
                             np.exp((arr - 83.9) / 38.9)))
    return float(rate) if np.isscalar(x) else rate


def hko7_rate_to_pixel(rate):
    """Rain rate (mm/h) -> byte pixel via the reflectivity power law.

    dBZ = 10 log10(58.53) + 15.6 log10(R); pixel = floor(255 (dBZ+10)/70 + 0.5).
    """
    arr = np.asarray(rate, dtype=np.float64)
    if np.any(arr <= 0):
        raise ValueError("rain rate must be positive")
    dbz = 10.0 * math.log10(58.53) + 10.0 * 1.56 * np.log10(arr)
    pixel = np.floor(255.0 * (dbz + 10.0) / 70.0 + 0.5).astype(np.int64)
    return int(pixel) if np.isscalar(rate) else pixel


def meteonet_rate_to_dbz(rate):
    """Rain rate (mm/h) -> dBZ via the Marshall-Palmer relation Z = 200 R^1.6."""
    arr = np.asarray(rate, dtype=np.float64)
    if np.any(arr <= 0):
        raise ValueError("rain rate must be positive")
    dbz = 10.0 * np.log10(200.0 * arr ** 1.6)
    return float(dbz) if np.isscalar(rate) else dbz


def hko7_threshold_table(rates: Sequence[float] = RAIN_RATE_THRESHOLDS) -> list[int]:
    return [hko7_rate_to_pixel(r) for r in rates]


def meteonet_threshold_table(rates: Sequence[float] = RAIN_RATE_THRESHOLDS) -> list[int]:
    """Integer dBZ thresholds: the smallest integer at or above which the
    rain rate is reached (ceiling of the exact dBZ)."""
    return [int(math.ceil(meteonet_rate_to_dbz(r))) for r in rates]
