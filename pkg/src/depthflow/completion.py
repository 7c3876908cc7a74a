"""Depth completion: sparse observations as extra conditioning channels.

Ground truth is thinned to a small observed fraction; the dense conditioning
is the nearest-neighbor fill of the observed normalized depths plus the
Euclidean distance transform of the observation mask. Fine-tuning inflates
the trained estimation network's first convolution with zero-initialized
channels for the two maps, so the fresh completion model reproduces the base
model exactly until the first gradient step.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import Checkpoint
from .datagen import (
    DatasetQuantiles,
    DepthGrid,
    Scene,
    flow_source,
    normalize_depth,
)
from .exceptions import AllInvalid, EmptyMask, IncompatibleCheckpoint
from .flow import FlowSample, FlowTrainer, TrainConfig, sample_flow
from .network import UNetConfig
from .tensor import Tensor

COMPLETION_CHANNELS = 2  # dense sparse depth + mask distance


@dataclass
class SparseDepth:
    """Observed subset of a ground-truth depth grid."""

    values: DepthGrid          # observed entries only; others carry the sentinel
    mask: np.ndarray           # (H, W) bool, observed positions
    keep_fraction: float = 0.02


@dataclass
class CompletionConditioning:
    dense_sparse_depth: np.ndarray   # (1, H, W), normalized
    mask_distance: np.ndarray        # (1, H, W), L2 pixels scaled by 1/max(H, W)


def sparsify(gt: DepthGrid, keep_fraction: float = 0.02,
             seed: int = 0) -> SparseDepth:
    """Uniform random subset of the valid pixels, without replacement.

    Observed count is max(1, round(keep_fraction * H * W)), saturated at the
    number of valid pixels.
    """
    if not gt.valid.any():
        raise AllInvalid("cannot sparsify a grid with no valid pixel")
    h, w = gt.shape
    want = max(1, int(round(keep_fraction * h * w)))
    vy, vx = np.nonzero(gt.valid)
    take = min(want, vy.size)
    rng = np.random.default_rng(seed)
    sel = rng.choice(vy.size, size=take, replace=False)
    mask = np.zeros((h, w), dtype=bool)
    mask[vy[sel], vx[sel]] = True
    values = np.where(mask, gt.values, -1.0).astype(np.float32)
    return SparseDepth(values=DepthGrid(values, mask), mask=mask,
                       keep_fraction=keep_fraction)


def distance_transform_l2(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from every pixel to the nearest true pixel.

    Brute force over seed pixels; exact at the grid sizes this package uses.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("mask has no true pixel")
    h, w = mask.shape
    sy, sx = np.nonzero(mask)
    seeds = np.stack([sy, sx], axis=1).astype(np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    out = np.empty(h * w, dtype=np.float64)
    for start in range(0, pts.shape[0], 4096):
        sl = slice(start, start + 4096)
        d2 = ((pts[sl, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
        out[sl] = np.sqrt(d2.min(axis=1))
    return out.reshape(h, w).astype(np.float32)


def build_completion_conditioning(sd: SparseDepth,
                                  q: DatasetQuantiles) -> CompletionConditioning:
    """Dense channels from a sparse observation: NN-filled normalized depth
    and the scaled distance transform of the mask."""
    # normalize_depth NN-fills unobserved pixels first; the pointwise
    # normalization commutes with the fill.
    dense = normalize_depth(DepthGrid(sd.values.values, sd.mask), q)
    h, w = sd.mask.shape
    # diagonal distances can exceed max(H, W); clip into [0, 1]
    dist = np.clip(distance_transform_l2(sd.mask) / float(max(h, w)), 0.0, 1.0)
    return CompletionConditioning(dense_sparse_depth=dense,
                                  mask_distance=dist[None].astype(np.float32))


def conditioning_array(cc: CompletionConditioning) -> np.ndarray:
    return np.concatenate([cc.dense_sparse_depth, cc.mask_distance], axis=0)


def inflate_first_conv(ckpt: Checkpoint,
                       extra_channels: int = COMPLETION_CHANNELS) -> tuple[UNetConfig, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Config and parameter tables with the stem convolution widened by
    zero-initialized input channels; all existing weights are preserved."""
    if ckpt.net_config.extra_cond_channels != 0:
        raise IncompatibleCheckpoint("checkpoint already has extra conditioning")
    cfg = replace(ckpt.net_config, extra_cond_channels=extra_channels)

    def widen(table: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {k: v.copy() for k, v in table.items()}
        stem = out["stem.w"]
        pad = np.zeros((stem.shape[0], extra_channels, 3, 3), dtype=stem.dtype)
        out["stem.w"] = np.concatenate([stem, pad], axis=1)
        return out

    return cfg, widen(ckpt.params), widen(ckpt.ema)


def completion_sample(scene: Scene, cc: CompletionConditioning,
                      config: TrainConfig, rng: np.random.Generator) -> FlowSample:
    x0 = flow_source(scene.image)
    fs = sample_flow((x0, scene.normalized_depth), config, rng, cond=scene.image)
    fs.extra_cond = conditioning_array(cc)
    return fs


def finetune_completion(base: Checkpoint, scenes: list[Scene],
                        config: TrainConfig, keep_fraction: float = 0.02,
                        log=None, log_every: int = 50) -> Checkpoint:
    """Fine-tune an estimation checkpoint into a completion model.

    Sparse observations are redrawn per step with seeds from the trainer's
    data stream; before the first step the inflated model's outputs equal the
    base model's.
    """
    if any(s.normalized_depth is None for s in scenes):
        raise ValueError("scenes need normalized depth; attach quantiles first")
    cfg, params, ema = inflate_first_conv(base)
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    trainer = FlowTrainer(cfg, config, params=tensors)
    trainer.ema = {k: v.copy() for k, v in ema.items()}

    import time
    smooth = None
    t0 = time.perf_counter()
    for step in range(config.steps):
        idx = trainer.data_rng.integers(0, len(scenes), size=config.batch_size)
        batch = []
        for i in idx:
            s = scenes[i]
            sparse_seed = int(trainer.data_rng.integers(0, 2**31 - 1))
            sd = sparsify(s.depth, keep_fraction, sparse_seed)
            cc = build_completion_conditioning(sd, base.quantiles)
            batch.append(completion_sample(s, cc, config, trainer.aug_rng))
        value = trainer.train_step(batch)
        if log is not None and (step % log_every == 0 or step == config.steps - 1):
            smooth = value if smooth is None else 0.98 * smooth + 0.02 * value
            wall_ms = (time.perf_counter() - t0) * 1000.0
            log(f"{step + 1},{value:.6f},{smooth:.6f},{wall_ms:.1f}")

    return Checkpoint(
        net_config=cfg, train_config=config, quantiles=base.quantiles,
        params={k: p.data.copy() for k, p in trainer.params.items()},
        ema={k: v.copy() for k, v in trainer.ema.items()},
        rng_note=f"finetuned from estimation checkpoint; seed {config.seed}")
