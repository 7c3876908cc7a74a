"""Affine-invariant alignment and the depth metric suite.

Predictions carry an unknown global scale and shift, so every metric runs on
the prediction after a closed-form least-squares fit a*p + b ~ g over jointly
valid pixels (log space by default). Edge fidelity uses Sobel edges on
min-max-normalized depth and tolerance-based precision/recall; coupling costs
quantify how much shorter paired image-depth transport is than random
pairing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .datagen import DepthGrid
from .exceptions import (
    DegenerateGT,
    DegenerateSplit,
    NonPositivePrediction,
    NoValidPixels,
    ShapeMismatch,
    SizeMismatch,
    TooFewValid,
    TooLargeForOptimal,
)

OPTIMAL_COUPLING_CAP = 64


@dataclass(frozen=True)
class AffineFit:
    """Fitted alignment. `a`, `b` satisfy aligned = a*pred + b in fit space;
    `scale`, `shift` are the equivalent (s, t) of the d_hat = (d* - t)/s
    convention."""

    a: float
    b: float
    fit_space: str

    @property
    def scale(self) -> float:
        return 1.0 / self.a

    @property
    def shift(self) -> float:
        return -self.b / self.a


@dataclass
class EdgeMap:
    edges: np.ndarray    # (H, W) bool
    threshold: float


def _joint_valid(pred: DepthGrid, gt: DepthGrid) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    return pred.valid & gt.valid


def _to_fit_space(v: np.ndarray, space: str) -> np.ndarray:
    if space == "log":
        return np.log(np.maximum(v.astype(np.float64), 1e-12))
    if space == "linear":
        return v.astype(np.float64)
    raise ValueError(f"unknown fit space {space!r}")


def _from_fit_space(v: np.ndarray, space: str) -> np.ndarray:
    return np.exp(v) if space == "log" else v


def affine_align(pred: DepthGrid, gt: DepthGrid,
                 space: str = "log") -> tuple[DepthGrid, AffineFit]:
    """Least-squares a*p + b ~ g in fit space; returns the aligned prediction
    (mapped back to metric depth, jointly-valid mask) and the fit."""
    mask = _joint_valid(pred, gt)
    if mask.sum() < 2:
        raise TooFewValid(f"need >= 2 jointly-valid pixels, got {int(mask.sum())}")
    p = _to_fit_space(pred.values[mask], space)
    g = _to_fit_space(gt.values[mask], space)
    if np.ptp(g) == 0.0:
        raise DegenerateGT("ground truth constant in fit space")
    pvar = p - p.mean()
    denom = (pvar * pvar).sum()
    if denom == 0.0:
        raise DegenerateGT("prediction constant in fit space; no scale exists")
    a = float((pvar * (g - g.mean())).sum() / denom)
    b = float(g.mean() - a * p.mean())
    if a <= 0.0:
        raise DegenerateGT(f"fit scale a={a:.4g} is not positive")
    aligned_vals = _from_fit_space(
        a * _to_fit_space(pred.values, space) + b, space).astype(np.float32)
    aligned = DepthGrid(np.where(mask, aligned_vals, -1.0), mask)
    return aligned, AffineFit(a=a, b=b, fit_space=space)


def abs_rel(pred_aligned: DepthGrid, gt: DepthGrid) -> float:
    """Mean over valid pixels of |gt - pred| / gt."""
    mask = _joint_valid(pred_aligned, gt)
    if not mask.any():
        raise NoValidPixels("no jointly-valid pixels")
    d = gt.values[mask].astype(np.float64)
    dh = pred_aligned.values[mask].astype(np.float64)
    if (d <= 0).any():
        raise NoValidPixels("ground truth must be positive at valid pixels")
    return float(np.mean(np.abs(d - dh) / d))


def delta1(pred_aligned: DepthGrid, gt: DepthGrid) -> float:
    """Fraction of valid pixels with max(d/dh, dh/d) strictly below 1.25."""
    mask = _joint_valid(pred_aligned, gt)
    if not mask.any():
        raise NoValidPixels("no jointly-valid pixels")
    d = gt.values[mask].astype(np.float64)
    dh = pred_aligned.values[mask].astype(np.float64)
    if (d <= 0).any():
        raise NoValidPixels("ground truth must be positive at valid pixels")
    if (dh <= 0).any():
        raise NonPositivePrediction("prediction must be positive at valid pixels")
    ratio = np.maximum(d / dh, dh / d)
    return float(np.mean(ratio < 1.25))


def rmse(pred_aligned: DepthGrid, gt: DepthGrid) -> float:
    """Root mean squared error in meters over valid pixels."""
    mask = _joint_valid(pred_aligned, gt)
    if not mask.any():
        raise NoValidPixels("no jointly-valid pixels")
    diff = (gt.values[mask] - pred_aligned.values[mask]).astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


def _replicate_pad(a: np.ndarray) -> np.ndarray:
    return np.pad(a, 1, mode="edge")


def sobel_edges(depth: DepthGrid, threshold: float = 0.1) -> EdgeMap:
    """Edges of min-max-normalized depth: Sobel magnitude > threshold.

    Requires a fully valid grid (apply fill_invalid first). A constant grid
    has no edges for any positive threshold.
    """
    if not depth.valid.all():
        raise NoValidPixels("sobel_edges requires a fully valid grid")
    v = depth.values.astype(np.float64)
    rng = np.ptp(v)
    if rng == 0.0:
        return EdgeMap(np.zeros(depth.shape, dtype=bool), threshold)
    v = (v - v.min()) / rng
    p = _replicate_pad(v)
    gx = np.zeros_like(v)
    gy = np.zeros_like(v)
    h, w = v.shape
    for dy in range(3):
        for dx in range(3):
            sl = p[dy:dy + h, dx:dx + w]
            gx += _SOBEL_X[dy, dx] * sl
            gy += _SOBEL_Y[dy, dx] * sl
    mag = np.sqrt(gx * gx + gy * gy)
    return EdgeMap(mag > threshold, threshold)


def dilate_chebyshev(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a Chebyshev ball (square) of the given radius."""
    out = mask.copy()
    h, w = mask.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            ys = slice(max(0, dy), min(h, h + dy))
            yd = slice(max(0, -dy), min(h, h - dy))
            xs = slice(max(0, dx), min(w, w + dx))
            xd = slice(max(0, -dx), min(w, w - dx))
            out[yd, xd] |= mask[ys, xs]
    return out


class EdgePR(NamedTuple):
    precision: float
    recall: float
    pred_empty: bool
    gt_empty: bool


def edge_precision_recall(pred_edges: EdgeMap, gt_edges: EdgeMap,
                          tolerance: int = 1) -> EdgePR:
    """precision = |pred within tolerance of gt| / |pred|;
    recall = |gt within tolerance of pred| / |gt|. Empty sides yield 0 with
    the corresponding flag set."""
    pe, ge = pred_edges.edges, gt_edges.edges
    if pe.shape != ge.shape:
        raise ShapeMismatch(f"{pe.shape} vs {ge.shape}")
    pred_empty = not pe.any()
    gt_empty = not ge.any()
    precision = 0.0
    recall = 0.0
    if not pred_empty:
        hit = pe & dilate_chebyshev(ge, tolerance)
        precision = float(hit.sum() / pe.sum())
    if not gt_empty:
        hit = ge & dilate_chebyshev(pe, tolerance)
        recall = float(hit.sum() / ge.sum())
    return EdgePR(precision, recall, pred_empty, gt_empty)


def _pair_cost(a: np.ndarray, b: np.ndarray, norm: str) -> float:
    diff = (a - b).astype(np.float64).ravel()
    if norm == "l1":
        return float(np.mean(np.abs(diff)))
    if norm == "l2":
        return float(np.sqrt(np.mean(diff * diff)))
    raise ValueError(f"unknown norm {norm!r}")


def coupling_cost(x0s, x1s, pairing: str = "paired", norm: str = "l2",
                  seed: int = 0) -> float:
    """Mean per-element-normalized transport cost of a pairing between two
    equally sized sample sets.

    paired: index-aligned; random: seeded permutation; optimal: assignment-
    problem minimum (capped at 64 samples).
    """
    x0s = [np.asarray(x) for x in x0s]
    x1s = [np.asarray(x) for x in x1s]
    if len(x0s) != len(x1s):
        raise SizeMismatch(f"{len(x0s)} vs {len(x1s)} samples")
    n = len(x0s)
    if n == 0:
        raise SizeMismatch("empty sample sets")
    for a, b in zip(x0s, x1s):
        if a.shape != b.shape:
            raise ShapeMismatch(f"sample shapes differ: {a.shape} vs {b.shape}")
    if pairing == "paired":
        return float(np.mean([_pair_cost(a, b, norm) for a, b in zip(x0s, x1s)]))
    if pairing == "random":
        perm = np.random.default_rng(seed).permutation(n)
        return float(np.mean([_pair_cost(x0s[i], x1s[perm[i]], norm)
                              for i in range(n)]))
    if pairing == "optimal":
        if n > OPTIMAL_COUPLING_CAP:
            raise TooLargeForOptimal(f"{n} > {OPTIMAL_COUPLING_CAP} samples")
        cost = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                cost[i, j] = _pair_cost(x0s[i], x1s[j], norm)
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean())
    raise ValueError(f"unknown pairing {pairing!r}")


def uncertainty_error_ratio(result, gt: DepthGrid, q: float = 0.8,
                            fit_space: str = "log") -> float:
    """Mean absolute error of the aligned ensemble mean in high-uncertainty
    pixels (std above the q-quantile) divided by the mean in the rest."""
    std = np.asarray(result.std_depth)
    if std.ndim == 3:
        std = std[0]
    aligned, _ = affine_align(result.mean_depth, gt, fit_space)
    mask = _joint_valid(aligned, gt)
    svals = std[mask]
    if np.ptp(svals) == 0.0:
        raise DegenerateSplit("uncertainty constant over valid pixels")
    cut = np.quantile(svals, q)
    high = mask & (std > cut)
    low = mask & (std <= cut)
    if high.sum() < 10 or low.sum() < 10:
        raise DegenerateSplit(
            f"quantile split too small: {int(high.sum())} high / "
            f"{int(low.sum())} low")
    err = np.abs(aligned.values.astype(np.float64) - gt.values.astype(np.float64))
    return float(err[high].mean() / err[low].mean())


METRICS_HEADER = "dataset,n_images,abs_rel,delta1,rmse,edge_p,edge_r,unc_ratio"


@dataclass
class MetricsReport:
    dataset: str
    n_images: int
    abs_rel: float
    delta1: float
    rmse: float
    edge_p: float
    edge_r: float
    unc_ratio: float

    def csv_row(self) -> str:
        return (f"{self.dataset},{self.n_images},{self.abs_rel:.6f},"
                f"{self.delta1:.6f},{self.rmse:.6f},{self.edge_p:.6f},"
                f"{self.edge_r:.6f},{self.unc_ratio:.6f}")
