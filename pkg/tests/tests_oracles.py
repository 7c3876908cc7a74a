"""Brute-force oracles shared by the acceptance suite (criterion 10)."""

import numpy as np

from depthflow.completion import distance_transform_l2
from depthflow.datagen import DepthGrid
from depthflow.evalkit import (
    EdgeMap,
    abs_rel,
    affine_align,
    delta1,
    edge_precision_recall,
    rmse,
)


def _grid(vals):
    return DepthGrid.full_valid(np.asarray(vals, dtype=np.float32))


def _brute_pr(pred, gt, tol):
    h, w = pred.shape

    def matched(y, x, other):
        for dy in range(-tol, tol + 1):
            for dx in range(-tol, tol + 1):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and other[yy, xx]:
                    return True
        return False

    pp = [(y, x) for y in range(h) for x in range(w) if pred[y, x]]
    gp = [(y, x) for y in range(h) for x in range(w) if gt[y, x]]
    p = sum(matched(y, x, gt) for y, x in pp) / len(pp) if pp else 0.0
    r = sum(matched(y, x, pred) for y, x in gp) / len(gp) if gp else 0.0
    return p, r


def _brute_edt(mask):
    h, w = mask.shape
    seeds = [(y, x) for y in range(h) for x in range(w) if mask[y, x]]
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            out[y, x] = min(np.hypot(y - sy, x - sx) for sy, sx in seeds)
    return out


def run_all():
    """Returns (ok, detail). Every check compares against an independent
    hand-computed or brute-force value."""
    checks = []

    # point metrics, hand-computed
    checks.append(("abs_rel 0.5", abs(abs_rel(_grid([[1.0]]), _grid([[2.0]]))
                                      - 0.5) < 1e-5))
    checks.append(("abs_rel 0.1", abs(abs_rel(_grid([[1.1, 1.8]]),
                                              _grid([[1.0, 2.0]])) - 0.1) < 1e-5))
    checks.append(("rmse sqrt(12.5)",
                   abs(rmse(_grid([[3.0, 4.0]]), _grid([[0.0, 0.0]]))
                       - np.sqrt(12.5)) < 1e-5))
    checks.append(("delta1 half", abs(delta1(_grid([[1.2, 1.3]]),
                                             _grid([[1.0, 1.0]])) - 0.5) < 1e-9))
    # strict boundary: 5/4 is exactly 1.25 in binary floating point
    checks.append(("delta1 strict boundary",
                   delta1(_grid([[5.0]]), _grid([[4.0]])) == 0.0))

    # log-affine alignment recovers gt exactly
    rng = np.random.default_rng(0)
    gt_vals = rng.uniform(1.0, 10.0, size=(8, 8)).astype(np.float32)
    pred = _grid(np.exp(2.0 * np.log(gt_vals) + 3.0))
    aligned, _ = affine_align(pred, _grid(gt_vals), "log")
    checks.append(("log-affine 2x+3 case",
                   float(np.max(np.abs(aligned.values - gt_vals)
                                / gt_vals)) < 1e-5))

    # edge precision/recall vs brute force on 10 random 16x16 fixtures
    pr_ok = True
    for seed in range(10):
        r = np.random.default_rng(seed)
        pe = r.uniform(size=(16, 16)) < 0.15
        ge = r.uniform(size=(16, 16)) < 0.15
        res = edge_precision_recall(EdgeMap(pe, 0.1), EdgeMap(ge, 0.1), 1)
        bp, br = _brute_pr(pe, ge, 1)
        pr_ok &= res.precision == bp and res.recall == br
    checks.append(("edge PR brute force 10/10", pr_ok))

    # distance transform vs brute force on property-sampled grids <= 32x32
    edt_ok = True
    for seed in range(12):
        r = np.random.default_rng(100 + seed)
        h = int(r.integers(2, 33))
        w = int(r.integers(2, 33))
        m = r.uniform(size=(h, w)) < 0.07
        if not m.any():
            m[r.integers(h), r.integers(w)] = True
        edt_ok &= bool(np.allclose(distance_transform_l2(m), _brute_edt(m),
                                   atol=1e-6))
    checks.append(("distance transform brute force 12/12", edt_ok))

    ok = all(flag for _, flag in checks)
    failed = [name for name, flag in checks if not flag]
    detail = ("all metric oracles agree" if ok
              else f"oracle disagreement: {failed}")
    return ok, detail
