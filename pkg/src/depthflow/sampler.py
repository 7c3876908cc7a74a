"""ODE inference: Euler integration from the image to the depth prediction.

The start state is the noise-augmented image (direct transport), integrated
with a fixed number of left-endpoint Euler steps. Ensembles rerun the
integration with fresh augmentation noise; members are aggregated in
normalized space before denormalization, and the per-pixel standard
deviation over members is the uncertainty signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .datagen import DepthGrid, denormalize_depth, flow_source
from .exceptions import NonFiniteState, ShapeMismatch
from .flow import NoiseSchedule, noise_augment
from .network import UNetConfig, forward_batch
from .tensor import Tensor


@dataclass(frozen=True)
class SamplerConfig:
    nfe: int = 4
    ensemble_size: int = 10
    t_s: float = 0.4          # taken from the checkpoint's training config
    use_ema: bool = True

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError("nfe must be >= 1")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")


@dataclass
class EnsembleResult:
    """Per-pixel aggregate over ensemble members.

    `members` and `std_depth` live in normalized depth space ([-1, 1]);
    `mean_depth` is the denormalized (metric) mean of the members.
    """

    mean_depth: DepthGrid
    std_depth: np.ndarray      # (1, H, W), population std over members
    members: np.ndarray        # (N, 1, H, W), normalized space


def aggregate_members(members: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel mean and population standard deviation over axis 0.

    Accumulates in float64 so identical members give an exactly-zero std.
    """
    m64 = members.astype(np.float64)
    mean = m64.mean(axis=0)
    std = np.sqrt(((m64 - mean) ** 2).mean(axis=0))
    return mean.astype(members.dtype), std.astype(members.dtype)


def euler_integrate(net_config: UNetConfig, params: dict[str, Tensor],
                    x_start: np.ndarray, cond: np.ndarray, nfe: int,
                    extra_cond: np.ndarray | None = None,
                    field=None) -> np.ndarray:
    """Integrate dx = v(t, x; cond) dt from t=0 to t=1 with `nfe` Euler steps.

    Evaluation nodes are t_i = i/nfe (left endpoints). `field` overrides the
    network with a callable (t, x) -> velocity, used by tests.
    """
    if nfe < 1:
        raise ValueError("nfe must be >= 1")
    x = np.asarray(x_start, dtype=np.float32).copy()
    dt = 1.0 / nfe
    cond_t = Tensor(cond[None]) if cond is not None else None
    extra_t = Tensor(extra_cond[None]) if extra_cond is not None else None
    for i in range(nfe):
        t = i / nfe
        if field is not None:
            v = np.asarray(field(t, x), dtype=np.float32)
        else:
            out = forward_batch(net_config, params,
                                np.asarray([t], dtype=np.float32),
                                Tensor(x[None]), cond_t, extra_t)
            v = out.data[0]
        x = x + dt * v
        if not np.isfinite(x).all():
            raise NonFiniteState(f"state became non-finite at t={t}")
    return x


def _predict_normalized(ckpt: Checkpoint, image: np.ndarray,
                        config: SamplerConfig, rng: np.random.Generator,
                        params: dict[str, Tensor],
                        extra_cond: np.ndarray | None = None) -> np.ndarray:
    x0 = flow_source(image)
    if ckpt.train_config.source == "noise":
        # a noise-to-depth model integrates from a fresh Gaussian draw
        x_start = rng.standard_normal(size=x0.shape).astype(np.float32)
    else:
        x_start = noise_augment(x0, NoiseSchedule(config.t_s), rng)
    out = euler_integrate(ckpt.net_config, params, x_start, image,
                          config.nfe, extra_cond)
    return np.clip(out, -1.0, 1.0)


def _check_image(ckpt: Checkpoint, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] != ckpt.net_config.cond_channels:
        raise ShapeMismatch(
            f"image shape {image.shape} does not match the trained model "
            f"({ckpt.net_config.cond_channels} channels)")
    ckpt.net_config.validate_spatial(image.shape[1], image.shape[2])


def predict_depth(ckpt: Checkpoint, image: np.ndarray, config: SamplerConfig,
                  rng: np.random.Generator,
                  extra_cond: np.ndarray | None = None) -> DepthGrid:
    """Single-member metric depth prediction for one (C, H, W) image."""
    _check_image(ckpt, image)
    params = ckpt.param_tensors(use_ema=config.use_ema)
    nd = _predict_normalized(ckpt, image, config, rng, params, extra_cond)
    return denormalize_depth(nd, ckpt.quantiles)


def ensemble_predict(ckpt: Checkpoint, image: np.ndarray, config: SamplerConfig,
                     rng: np.random.Generator,
                     extra_cond: np.ndarray | None = None) -> EnsembleResult:
    """N independent members differing only in their augmentation noise."""
    _check_image(ckpt, image)
    params = ckpt.param_tensors(use_ema=config.use_ema)
    members = np.stack([
        _predict_normalized(ckpt, image, config, rng, params, extra_cond)
        for _ in range(config.ensemble_size)
    ])
    mean_nd, std = aggregate_members(members)
    return EnsembleResult(mean_depth=denormalize_depth(mean_nd, ckpt.quantiles),
                          std_depth=std, members=members)
