"""The conditioned vector-field network.

A small UNet that maps (time, flowing state, clean image conditioning) to a
velocity with the same shape as the state. Conditioning enters by channel
concatenation at the input; time enters each residual block through a learned
linear projection of a sinusoidal embedding, added per channel after the
block's first convolution. No normalization layers; SiLU activations;
nearest-neighbor upsampling; the output convolution is zero-initialized so
the untrained network is the identity flow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import OutOfRangeT, ShapeMismatch
from .tensor import Tensor

TIME_SCALE = 1000.0  # t in [0,1] is scaled before the sinusoids, mirroring
                     # discrete-timestep embeddings


@dataclass(frozen=True)
class UNetConfig:
    """Architecture of the vector-field network."""

    base_width: int = 32
    depth_levels: int = 2
    state_channels: int = 1
    cond_channels: int = 1
    extra_cond_channels: int = 0   # completion conditioning, 0 when disabled
    time_embed_dim: int = 64

    @property
    def in_channels(self) -> int:
        return self.state_channels + self.cond_channels + self.extra_cond_channels

    @property
    def out_channels(self) -> int:
        return self.state_channels

    @property
    def level_widths(self) -> list[int]:
        return [self.base_width * (2 ** l) for l in range(self.depth_levels + 1)]

    def validate_spatial(self, h: int, w: int) -> None:
        f = 2 ** self.depth_levels
        if h % f or w % f:
            raise ShapeMismatch(
                f"spatial dims {h}x{w} must be divisible by {f}")

    def to_dict(self) -> dict:
        return {
            "base_width": self.base_width,
            "depth_levels": self.depth_levels,
            "state_channels": self.state_channels,
            "cond_channels": self.cond_channels,
            "extra_cond_channels": self.extra_cond_channels,
            "time_embed_dim": self.time_embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def time_embedding(t: float, dim: int) -> np.ndarray:
    """Sinusoidal embedding of a scalar time in [0, 1].

    Pairs sin/cos at frequencies 10000^(-2k/dim), with t scaled by
    TIME_SCALE. Returned layout is [sin..., cos...], each half dim/2 wide.
    """
    if not 0.0 <= t <= 1.0:
        raise OutOfRangeT(f"t={t} outside [0, 1]")
    if dim % 2:
        raise ShapeMismatch(f"time_embed_dim must be even, got {dim}")
    return time_embedding_batch(np.asarray([t]), dim)[0]


def time_embedding_batch(ts: np.ndarray, dim: int) -> np.ndarray:
    ts = np.asarray(ts, dtype=T.default_dtype())
    if ts.min() < 0.0 or ts.max() > 1.0:
        raise OutOfRangeT("time values outside [0, 1]")
    half = dim // 2
    k = np.arange(half, dtype=T.default_dtype())
    freqs = np.power(10000.0, -2.0 * k / dim).astype(T.default_dtype())
    args = TIME_SCALE * ts[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(T.default_dtype())


def init_params(config: UNetConfig, seed: int) -> dict[str, Tensor]:
    """Deterministic parameter table. The output convolution starts at zero."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def conv(name: str, cin: int, cout: int, zero: bool = False) -> None:
        if zero:
            w = np.zeros((cout, cin, 3, 3), dtype=T.default_dtype())
            b = np.zeros(cout, dtype=T.default_dtype())
        else:
            w = _uniform_fan_in(rng, (cout, cin, 3, 3), cin * 9)
            b = _uniform_fan_in(rng, (cout,), cin * 9)
        params[f"{name}.w"] = Tensor(w, requires_grad=True)
        params[f"{name}.b"] = Tensor(b, requires_grad=True)

    def lin(name: str, fin: int, fout: int) -> None:
        params[f"{name}.w"] = Tensor(_uniform_fan_in(rng, (fout, fin), fin),
                                     requires_grad=True)
        params[f"{name}.b"] = Tensor(_uniform_fan_in(rng, (fout,), fin),
                                     requires_grad=True)

    def res_block(prefix: str, width: int) -> None:
        conv(f"{prefix}.conv1", width, width)
        lin(f"{prefix}.temb", config.time_embed_dim, width)
        conv(f"{prefix}.conv2", width, width)

    widths = config.level_widths
    conv("stem", config.in_channels, widths[0])
    for l in range(config.depth_levels):
        res_block(f"down{l}", widths[l])
        conv(f"trans{l}", widths[l], widths[l + 1])
    # two bottleneck blocks: capacity is cheapest at the lowest resolution
    res_block("mid", widths[-1])
    res_block("mid2", widths[-1])
    for l in reversed(range(config.depth_levels)):
        # channel reduction happens before upsampling (cheaper), then the
        # skip joins additively
        conv(f"up{l}.reduce", widths[l + 1], widths[l])
        res_block(f"up{l}", widths[l])
    conv("out", widths[0], config.out_channels, zero=True)
    return params


def _res_block_forward(params: dict[str, Tensor], prefix: str,
                       h: Tensor, temb: Tensor) -> Tensor:
    y = T.conv2d(h, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"])
    tproj = T.linear(temb, params[f"{prefix}.temb.w"], params[f"{prefix}.temb.b"])
    y = T.add(y, tproj)
    y = T.silu(y)
    y = T.conv2d(y, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"])
    return T.add(h, y)


def forward_batch(config: UNetConfig, params: dict[str, Tensor],
                  ts: np.ndarray, x_t: Tensor, cond: Tensor,
                  extra_cond: Tensor | None = None) -> Tensor:
    """Batched vector field: ts (N,), x_t (N,S,H,W), cond (N,C,H,W)."""
    n, s, h, w = x_t.shape
    config.validate_spatial(h, w)
    if s != config.state_channels:
        raise ShapeMismatch(f"state has {s} channels, config expects "
                            f"{config.state_channels}")
    if cond.shape != (n, config.cond_channels, h, w):
        raise ShapeMismatch(f"cond shape {cond.shape} incompatible with state "
                            f"{x_t.shape}")
    if config.extra_cond_channels:
        if extra_cond is None or extra_cond.shape != \
                (n, config.extra_cond_channels, h, w):
            raise ShapeMismatch("extra conditioning channels missing or misshaped")
        x = T.concat_channels(x_t, cond, extra_cond)
    else:
        if extra_cond is not None:
            raise ShapeMismatch("network was not configured for extra conditioning")
        x = T.concat_channels(x_t, cond)

    temb = Tensor(time_embedding_batch(ts, config.time_embed_dim))
    hcur = T.conv2d(x, params["stem.w"], params["stem.b"])
    skips = []
    for l in range(config.depth_levels):
        hcur = _res_block_forward(params, f"down{l}", hcur, temb)
        skips.append(hcur)
        hcur = T.conv2d(T.avgpool2(hcur), params[f"trans{l}.w"],
                        params[f"trans{l}.b"])
    hcur = _res_block_forward(params, "mid", hcur, temb)
    hcur = _res_block_forward(params, "mid2", hcur, temb)
    for l in reversed(range(config.depth_levels)):
        hcur = T.conv2d(hcur, params[f"up{l}.reduce.w"], params[f"up{l}.reduce.b"])
        hcur = T.add(T.upsample_nearest2(hcur), skips[l])
        hcur = _res_block_forward(params, f"up{l}", hcur, temb)
    return T.conv2d(hcur, params["out.w"], params["out.b"])


def vector_field_forward(config: UNetConfig, params: dict[str, Tensor],
                         t: float, x_t: Tensor, cond: Tensor,
                         extra_cond: Tensor | None = None) -> Tensor:
    """Single-sample vector field v(t, x_t; cond) with CHW tensors.

    Inference wrapper around forward_batch; the un-batching step is not
    recorded, so train through forward_batch instead.
    """
    if not 0.0 <= t <= 1.0:
        raise OutOfRangeT(f"t={t} outside [0, 1]")
    xb = Tensor(x_t.data[None], dtype=x_t.data.dtype)
    cb = Tensor(cond.data[None], dtype=cond.data.dtype)
    eb = None
    if extra_cond is not None:
        eb = Tensor(extra_cond.data[None], dtype=extra_cond.data.dtype)
    out = forward_batch(config, params, np.asarray([t]), xb, cb, eb)
    return Tensor(out.data[0], dtype=out.data.dtype)
