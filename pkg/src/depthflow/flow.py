"""Training core: interpolants, noise augmentation, loss, optimizer, teacher.

The model regresses the straight-path velocity between a (noise-augmented)
image grid x0 and the normalized depth grid x1, conditioned on the clean
image. Pseudo-labeling trains the same architecture as a direct regressor
(time fixed at 0) and mixes teacher-labeled scenes into the ground-truth set
at a configurable ratio.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .datagen import (
    PSEUDO_LABEL,
    DatasetQuantiles,
    Scene,
    attach_normalized,
    denormalize_depth,
    flow_source,
)
from .exceptions import InsufficientPseudo, NonFiniteLoss, OutOfRangeT, ShapeMismatch
from .network import UNetConfig, forward_batch, init_params
from .tensor import Tape, Tensor, backward

COSINE_S = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine variance-preserving schedule evaluated at a fixed level t_s."""

    t_s: float = 0.4
    kind: str = "cosine"

    def alpha_bar(self) -> float:
        return cosine_alpha_bar(self.t_s)


def cosine_alpha_bar(t: float) -> float:
    """Normalized cosine schedule: alpha_bar(0) = 1, strictly decreasing."""
    if not 0.0 <= t <= 1.0:
        raise OutOfRangeT(f"t={t} outside [0, 1]")
    def f(u):
        return math.cos(((u + COSINE_S) / (1.0 + COSINE_S)) * math.pi / 2.0) ** 2
    return f(t) / f(0.0)


def noise_augment(xbar: np.ndarray, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> np.ndarray:
    """sqrt(a)*xbar + sqrt(1-a)*eps with a = alpha_bar(t_s); variance preserving."""
    a = schedule.alpha_bar()
    if a >= 1.0:
        return np.asarray(xbar, dtype=np.float32).copy()
    eps = rng.standard_normal(size=xbar.shape).astype(np.float32)
    return (np.sqrt(a) * xbar + np.sqrt(1.0 - a) * eps).astype(np.float32)


@dataclass
class FlowSample:
    """One training point on the probability path."""

    t: float
    x_t: np.ndarray        # interpolated state (S, H, W)
    target_u: np.ndarray   # regression target x1 - x0_used
    cond: np.ndarray       # clean image (C, H, W)
    x0_used: np.ndarray    # noise-augmented terminal
    extra_cond: np.ndarray | None = None


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 3e-4
    ema_rate: float = 0.999
    sigma_min: float = 1e-8
    t_s: float = 0.4
    steps: int = 3000
    seed: int = 0
    loss_norm: str = "squared_l2"
    source: str = "image"        # "image" (direct transport) or "noise"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size >= 1 and steps >= 0 required")
        if not 0.0 <= self.ema_rate < 1.0:
            raise ValueError(f"ema_rate {self.ema_rate} outside [0, 1)")
        if self.sigma_min < 0.0:
            raise ValueError("sigma_min must be >= 0")
        if not 0.0 <= self.t_s <= 1.0:
            raise ValueError("t_s must lie in [0, 1]")
        if self.loss_norm != "squared_l2":
            raise ValueError(f"unsupported loss_norm {self.loss_norm!r}")
        if self.source not in ("image", "noise"):
            raise ValueError(f"unknown source {self.source!r}")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size, "learning_rate": self.learning_rate,
            "ema_rate": self.ema_rate, "sigma_min": self.sigma_min,
            "t_s": self.t_s, "steps": self.steps, "seed": self.seed,
            "loss_norm": self.loss_norm, "source": self.source,
            "beta1": self.beta1, "beta2": self.beta2, "adam_eps": self.adam_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# Paper-reported preset kept for reference; the desk preset is sized for a
# CPU-minutes training run.
PRESETS = {
    "desk": TrainConfig(),
    "paper": TrainConfig(batch_size=128, learning_rate=3e-5, ema_rate=0.999,
                         sigma_min=1e-8, t_s=0.4),
}


def sample_flow(pair: tuple[np.ndarray, np.ndarray], config: TrainConfig,
                rng: np.random.Generator, t: float | None = None,
                cond: np.ndarray | None = None) -> FlowSample:
    """Draw one (t, x_t, target) tuple for an (x0 image, x1 depth) pair.

    `cond` defaults to x0; pass the full multi-channel image when x0 is its
    channel mean. With source="noise" the terminal x0 is a standard normal
    draw instead of the augmented image.
    """
    x0_img, x1 = pair
    if x0_img.shape != x1.shape:
        raise ShapeMismatch(f"pair shapes differ: {x0_img.shape} vs {x1.shape}")
    if t is None:
        t = float(rng.uniform())
    if config.source == "noise":
        x0_used = rng.standard_normal(size=x0_img.shape).astype(np.float32)
    else:
        x0_used = noise_augment(x0_img, NoiseSchedule(config.t_s), rng)
    x_t = (t * x1 + (1.0 - t) * x0_used).astype(np.float32)
    if config.sigma_min > 0.0:
        zeta = rng.standard_normal(size=x_t.shape).astype(np.float32)
        x_t = x_t + np.float32(config.sigma_min) * zeta
    target = (x1 - x0_used).astype(np.float32)
    return FlowSample(t=t, x_t=x_t, target_u=target,
                      cond=(x0_img if cond is None else cond), x0_used=x0_used)


def cfm_loss(v_pred: Tensor, target_u: Tensor) -> Tensor:
    """Mean squared error between predicted and target velocity."""
    return T.mse(v_pred, target_u)


class Adam:
    """Plain Adam over a named parameter table; updates are in place."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bias1
            vhat = v / bias2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


def ema_update(ema: dict[str, np.ndarray], params: dict[str, Tensor],
               rate: float) -> None:
    """ema <- rate*ema + (1-rate)*params, per parameter, in place."""
    for name, p in params.items():
        e = ema[name]
        e *= rate
        e += (1.0 - rate) * p.data


def init_ema(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _batch_tensors(samples: list[FlowSample]):
    ts = np.asarray([s.t for s in samples], dtype=np.float32)
    x_t = Tensor(np.stack([s.x_t for s in samples]))
    cond = Tensor(np.stack([s.cond for s in samples]))
    target = Tensor(np.stack([s.target_u for s in samples]))
    extra = None
    if samples[0].extra_cond is not None:
        extra = Tensor(np.stack([s.extra_cond for s in samples]))
    return ts, x_t, cond, target, extra


class FlowTrainer:
    """Owns parameters, EMA shadow, and the Adam state for one training run."""

    def __init__(self, net_config: UNetConfig, train_config: TrainConfig,
                 params: dict[str, Tensor] | None = None):
        self.net_config = net_config
        self.config = train_config
        self.params = params if params is not None \
            else init_params(net_config, train_config.seed)
        self.ema = init_ema(self.params)
        self.opt = Adam(self.params, train_config.learning_rate,
                        train_config.beta1, train_config.beta2,
                        train_config.adam_eps)
        ss = np.random.SeedSequence(train_config.seed)
        data_ss, aug_ss = ss.spawn(2)
        self.data_rng = np.random.default_rng(data_ss)
        self.aug_rng = np.random.default_rng(aug_ss)
        self.step_count = 0

    def train_step(self, batch: list[FlowSample]) -> float:
        """One Adam update on the flow-matching loss, then the EMA update."""
        if not batch:
            raise ValueError("empty batch")
        ts, x_t, cond, target, extra = _batch_tensors(batch)
        with Tape() as tape:
            v = forward_batch(self.net_config, self.params, ts, x_t, cond, extra)
            loss = cfm_loss(v, target)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLoss(f"loss {value} at step {self.step_count}")
        grads_by_tensor = backward(tape, loss, params=self.params.values())
        grads = {name: grads_by_tensor[p].data for name, p in self.params.items()}
        self.opt.step(grads)
        ema_update(self.ema, self.params, self.config.ema_rate)
        self.step_count += 1
        return value

    def make_batch(self, scenes: list[Scene]) -> list[FlowSample]:
        """Draw a batch of scenes (with replacement) and build flow samples."""
        idx = self.data_rng.integers(0, len(scenes), size=self.config.batch_size)
        batch = []
        for i in idx:
            s = scenes[i]
            if s.normalized_depth is None:
                raise ValueError("scene has no normalized depth; attach quantiles first")
            x0 = flow_source(s.image)
            batch.append(sample_flow((x0, s.normalized_depth), self.config,
                                     self.aug_rng, cond=s.image))
        return batch

    def run(self, scenes: list[Scene], steps: int | None = None,
            log=None, log_every: int = 50) -> float:
        """Train for `steps` steps over `scenes`; returns the last loss.

        `log` is a callable receiving CSV lines `step,loss,ema_loss,wall_ms`
        (ema_loss is the exponentially smoothed training loss).
        """
        steps = self.config.steps if steps is None else steps
        smooth = None
        last = float("nan")
        t0 = time.perf_counter()
        for i in range(steps):
            last = self.train_step(self.make_batch(scenes))
            smooth = last if smooth is None else 0.98 * smooth + 0.02 * last
            if log is not None and (i % log_every == 0 or i == steps - 1):
                wall_ms = (time.perf_counter() - t0) * 1000.0
                log(f"{self.step_count},{last:.6f},{smooth:.6f},{wall_ms:.1f}")
        return last

    def ema_tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v.copy()) for k, v in self.ema.items()}


def train_step(trainer: FlowTrainer, batch: list[FlowSample]) -> float:
    """Functional façade over FlowTrainer.train_step."""
    return trainer.train_step(batch)


def _teacher_batch(scenes: list[Scene], idx: np.ndarray, config: UNetConfig):
    imgs = np.stack([scenes[i].image for i in idx])
    targets = np.stack([scenes[i].normalized_depth for i in idx])
    zeros_state = np.zeros((len(idx), config.state_channels) + imgs.shape[2:],
                           dtype=np.float32)
    ts = np.zeros(len(idx), dtype=np.float32)
    return ts, Tensor(zeros_state), Tensor(imgs), Tensor(targets)


def teacher_forward(net_config: UNetConfig, params: dict[str, Tensor],
                    image: np.ndarray) -> np.ndarray:
    """Teacher prediction: normalized depth (1, H, W) clamped to [-1, 1]."""
    zeros_state = Tensor(np.zeros((1, net_config.state_channels) + image.shape[1:],
                                  dtype=np.float32))
    out = forward_batch(net_config, params, np.zeros(1, dtype=np.float32),
                        zeros_state, Tensor(image[None]))
    return np.clip(out.data[0], -1.0, 1.0)


def train_teacher(scenes: list[Scene], net_config: UNetConfig,
                  config: TrainConfig, log=None) -> dict[str, Tensor]:
    """Direct regressor image -> normalized depth on the same architecture.

    No time conditioning (t fixed at 0); squared-error loss; same optimizer
    and EMA machinery as the flow model. Returns the trained parameters.
    """
    if not scenes:
        raise ValueError("empty teacher dataset")
    if any(s.source != "ground_truth" for s in scenes):
        raise ValueError("teacher must train on ground-truth scenes only")
    params = init_params(net_config, config.seed)
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2,
               config.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    for step in range(config.steps):
        idx = rng.integers(0, len(scenes), size=config.batch_size)
        ts, state, imgs, targets = _teacher_batch(scenes, idx, net_config)
        with Tape() as tape:
            pred = forward_batch(net_config, params, ts, state, imgs)
            loss = T.mse(pred, targets)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLoss(f"teacher loss {value} at step {step}")
        grads_by_tensor = backward(tape, loss, params=params.values())
        opt.step({name: grads_by_tensor[p].data for name, p in params.items()})
        if log is not None and step % 100 == 0:
            log(f"teacher,{step},{value:.6f}")
    return params


def pseudo_label(teacher_params: dict[str, Tensor], scenes: list[Scene],
                 net_config: UNetConfig, quantiles: DatasetQuantiles) -> list[Scene]:
    """Teacher-labeled copies of `scenes`: predicted normalized depth, all
    pixels valid, source tag "pseudo_label"."""
    out = []
    for s in scenes:
        nd = teacher_forward(net_config, teacher_params, s.image)
        depth = denormalize_depth(nd, quantiles)
        out.append(Scene(image=s.image.copy(), depth=depth,
                         normalized_depth=nd.astype(np.float32),
                         source=PSEUDO_LABEL))
    return out


def build_mixed_dataset(gt: list[Scene], pseudo: list[Scene], k: float,
                        seed: int) -> list[Scene]:
    """All of `gt` plus a seeded uniform subset of `pseudo` of size
    round(k * |gt|)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    take = int(round(k * len(gt)))
    if take > len(pseudo):
        raise InsufficientPseudo(f"need {take} pseudo scenes, have {len(pseudo)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pseudo), size=take, replace=False) if take else []
    return list(gt) + [pseudo[int(i)] for i in idx]


def prepare_scenes(scenes: list[Scene], quantiles: DatasetQuantiles) -> list[Scene]:
    """Scenes with normalized depth attached (skips ones that already have it)."""
    return [s if s.normalized_depth is not None else attach_normalized(s, quantiles)
            for s in scenes]
