"""Scikit-learn style estimators wrapping the training and inference pipelines.

`FlowDepthEstimator.fit` consumes scenes (paired image/depth samples),
computes dataset quantiles, optionally distills from an in-repo teacher, and
trains the flow model; `predict` integrates the learned field and returns
metric depth grids. `TeacherDepthRegressor` is the discriminative
single-pass counterpart. Both follow sklearn conventions (constructor params
mirrored as attributes, fitted state with trailing underscores, get_params /
set_params via BaseEstimator), so they compose with the usual tooling.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .datagen import DepthGrid, Scene, compute_quantiles, fill_invalid
from .evalkit import (
    MetricsReport,
    affine_align,
    abs_rel,
    delta1,
    edge_precision_recall,
    rmse,
    sobel_edges,
    uncertainty_error_ratio,
)
from .exceptions import DegenerateSplit
from .flow import (
    FlowTrainer,
    TrainConfig,
    build_mixed_dataset,
    prepare_scenes,
    pseudo_label,
    teacher_forward,
    train_teacher,
)
from .network import UNetConfig
from .sampler import SamplerConfig, ensemble_predict, predict_depth


def _check_scenes(scenes) -> list[Scene]:
    scenes = list(scenes)
    if not scenes:
        raise ValueError("need at least one scene")
    hw = scenes[0].hw
    for s in scenes:
        if s.hw != hw:
            raise ValueError(f"mixed scene sizes: {hw} vs {s.hw}")
    return scenes


def _check_images(images, channels: int) -> list[np.ndarray]:
    out = []
    for im in images:
        arr = np.asarray(im, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != channels:
            raise ValueError(f"expected ({channels}, H, W) images, got {arr.shape}")
        out.append(arr)
    return out


class FlowDepthEstimator(BaseEstimator):
    """Generative monocular depth estimator trained with flow matching.

    Parameters mirror the training and sampling configuration; `fit` builds
    everything (quantiles, optional teacher distillation, flow training) and
    `predict` runs ensembled Euler sampling.
    """

    def __init__(self, base_width: int = 16, depth_levels: int = 2,
                 time_embed_dim: int = 64, cond_channels: int = 1,
                 steps: int = 3000, batch_size: int = 16,
                 learning_rate: float = 3e-4, ema_rate: float = 0.999,
                 sigma_min: float = 1e-8, t_s: float = 0.4,
                 source: str = "image", fn_kind: str = "log",
                 teacher_ratio: float = 0.0, teacher_steps: int = 1000,
                 unlabeled_scenes=None, nfe: int = 4, ensemble_size: int = 10,
                 use_ema: bool = True, seed: int = 0):
        self.base_width = base_width
        self.depth_levels = depth_levels
        self.time_embed_dim = time_embed_dim
        self.cond_channels = cond_channels
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.ema_rate = ema_rate
        self.sigma_min = sigma_min
        self.t_s = t_s
        self.source = source
        self.fn_kind = fn_kind
        self.teacher_ratio = teacher_ratio
        self.teacher_steps = teacher_steps
        self.unlabeled_scenes = unlabeled_scenes
        self.nfe = nfe
        self.ensemble_size = ensemble_size
        self.use_ema = use_ema
        self.seed = seed

    # --- configuration assembly ---

    def _net_config(self) -> UNetConfig:
        return UNetConfig(base_width=self.base_width,
                          depth_levels=self.depth_levels,
                          state_channels=1,
                          cond_channels=self.cond_channels,
                          time_embed_dim=self.time_embed_dim)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size,
                           learning_rate=self.learning_rate,
                           ema_rate=self.ema_rate, sigma_min=self.sigma_min,
                           t_s=self.t_s, steps=self.steps, seed=self.seed,
                           source=self.source)

    def sampler_config(self, nfe: int | None = None,
                       ensemble_size: int | None = None) -> SamplerConfig:
        return SamplerConfig(nfe=nfe or self.nfe,
                             ensemble_size=ensemble_size or self.ensemble_size,
                             t_s=self.t_s, use_ema=self.use_ema)

    # --- sklearn surface ---

    def fit(self, scenes, log=None) -> "FlowDepthEstimator":
        """Train on ground-truth scenes; distills from a teacher first when
        teacher_ratio > 0 (teacher trains on the same scenes)."""
        scenes = _check_scenes(scenes)
        train_config = self._train_config()
        net_config = self._net_config()
        quantiles = compute_quantiles(scenes, self.fn_kind)
        prepared = prepare_scenes(scenes, quantiles)

        self.teacher_params_ = None
        if self.teacher_ratio > 0.0:
            teacher_cfg = TrainConfig(
                batch_size=self.batch_size, learning_rate=self.learning_rate,
                steps=self.teacher_steps, seed=self.seed + 1)
            self.teacher_params_ = train_teacher(prepared, net_config,
                                                 teacher_cfg, log=log)
            unlabeled = (_check_scenes(self.unlabeled_scenes)
                         if self.unlabeled_scenes is not None else prepared)
            unlabeled = prepare_scenes(unlabeled, quantiles)
            pseudo = pseudo_label(self.teacher_params_, unlabeled,
                                  net_config, quantiles)
            prepared = build_mixed_dataset(prepared, pseudo,
                                           self.teacher_ratio,
                                           seed=self.seed + 2)
            if log is not None:
                log(f"# mixed dataset: {len(prepared)} samples")

        trainer = FlowTrainer(net_config, train_config)
        trainer.run(prepared, log=log)
        self.quantiles_ = quantiles
        self.checkpoint_ = Checkpoint.from_trainer(
            trainer, quantiles,
            rng_note=f"all randomness derived from seed {self.seed}")
        self.n_train_scenes_ = len(prepared)
        return self

    def _require_fitted(self) -> Checkpoint:
        ckpt = getattr(self, "checkpoint_", None)
        if ckpt is None:
            raise NotFittedError("call fit() or load() first")
        return ckpt

    def predict(self, images, rng: np.random.Generator | None = None) -> list[DepthGrid]:
        """Ensembled metric depth for each (C, H, W) image."""
        ckpt = self._require_fitted()
        images = _check_images(images, ckpt.net_config.cond_channels)
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        cfg = self.sampler_config()
        return [ensemble_predict(ckpt, im, cfg, rng).mean_depth for im in images]

    def predict_single(self, image, rng=None) -> DepthGrid:
        ckpt = self._require_fitted()
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        cfg = self.sampler_config(ensemble_size=1)
        return predict_depth(ckpt, np.asarray(image, dtype=np.float32), cfg, rng)

    def predict_ensemble(self, images, rng=None):
        ckpt = self._require_fitted()
        images = _check_images(images, ckpt.net_config.cond_channels)
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        cfg = self.sampler_config()
        return [ensemble_predict(ckpt, im, cfg, rng) for im in images]

    def score(self, scenes, rng=None) -> float:
        """Mean delta1 accuracy after log-space alignment (higher is better)."""
        report = evaluate_checkpoint(self._require_fitted(),
                                     _check_scenes(scenes),
                                     self.sampler_config(),
                                     rng if rng is not None
                                     else np.random.default_rng(self.seed))
        return report.delta1

    # --- persistence ---

    def save(self, path) -> None:
        save_checkpoint(path, self._require_fitted())

    @classmethod
    def load(cls, path) -> "FlowDepthEstimator":
        ckpt = load_checkpoint(path)
        est = cls(base_width=ckpt.net_config.base_width,
                  depth_levels=ckpt.net_config.depth_levels,
                  time_embed_dim=ckpt.net_config.time_embed_dim,
                  cond_channels=ckpt.net_config.cond_channels,
                  steps=ckpt.train_config.steps,
                  batch_size=ckpt.train_config.batch_size,
                  learning_rate=ckpt.train_config.learning_rate,
                  ema_rate=ckpt.train_config.ema_rate,
                  sigma_min=ckpt.train_config.sigma_min,
                  t_s=ckpt.train_config.t_s,
                  source=ckpt.train_config.source,
                  fn_kind=ckpt.quantiles.fn_kind,
                  seed=ckpt.train_config.seed)
        est.checkpoint_ = ckpt
        est.quantiles_ = ckpt.quantiles
        est.teacher_params_ = None
        return est


class TeacherDepthRegressor(BaseEstimator):
    """Discriminative depth regressor on the same UNet (single forward pass,
    time conditioning fixed at zero)."""

    def __init__(self, base_width: int = 16, depth_levels: int = 2,
                 time_embed_dim: int = 64, cond_channels: int = 1,
                 steps: int = 1000, batch_size: int = 16,
                 learning_rate: float = 3e-4, fn_kind: str = "log",
                 seed: int = 0):
        self.base_width = base_width
        self.depth_levels = depth_levels
        self.time_embed_dim = time_embed_dim
        self.cond_channels = cond_channels
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.fn_kind = fn_kind
        self.seed = seed

    def _net_config(self) -> UNetConfig:
        return UNetConfig(base_width=self.base_width,
                          depth_levels=self.depth_levels,
                          state_channels=1, cond_channels=self.cond_channels,
                          time_embed_dim=self.time_embed_dim)

    def fit(self, scenes, log=None) -> "TeacherDepthRegressor":
        scenes = _check_scenes(scenes)
        self.quantiles_ = compute_quantiles(scenes, self.fn_kind)
        prepared = prepare_scenes(scenes, self.quantiles_)
        cfg = TrainConfig(batch_size=self.batch_size,
                          learning_rate=self.learning_rate,
                          steps=self.steps, seed=self.seed)
        self.params_ = train_teacher(prepared, self._net_config(), cfg, log=log)
        return self

    def predict(self, images) -> list[DepthGrid]:
        if getattr(self, "params_", None) is None:
            raise NotFittedError("call fit() first")
        from .datagen import denormalize_depth
        images = _check_images(images, self.cond_channels)
        out = []
        for im in images:
            nd = teacher_forward(self._net_config(), self.params_, im)
            out.append(denormalize_depth(nd, self.quantiles_))
        return out

    def predict_normalized(self, images) -> list[np.ndarray]:
        if getattr(self, "params_", None) is None:
            raise NotFittedError("call fit() first")
        images = _check_images(images, self.cond_channels)
        return [teacher_forward(self._net_config(), self.params_, im)
                for im in images]


def evaluate_checkpoint(ckpt: Checkpoint, scenes, config: SamplerConfig,
                        rng: np.random.Generator, dataset: str = "held_out",
                        fit_space: str = "log", edge_threshold: float = 0.1,
                        edge_tolerance: int = 1) -> MetricsReport:
    """Full metric suite over a scene collection.

    Per scene: ensemble prediction, affine alignment in `fit_space`, point
    metrics, Sobel edge precision/recall against ground truth (invalid
    pixels filled first), and the uncertainty-error ratio (NaN when the
    ensemble is deterministic).
    """
    scenes = _check_scenes(scenes)
    vals = {"abs_rel": [], "delta1": [], "rmse": [], "edge_p": [], "edge_r": [],
            "unc": []}
    for s in scenes:
        res = ensemble_predict(ckpt, s.image, config, rng)
        aligned, _ = affine_align(res.mean_depth, s.depth, fit_space)
        vals["abs_rel"].append(abs_rel(aligned, s.depth))
        vals["delta1"].append(delta1(aligned, s.depth))
        vals["rmse"].append(rmse(aligned, s.depth))
        pred_edges = sobel_edges(fill_invalid(res.mean_depth), edge_threshold)
        gt_edges = sobel_edges(fill_invalid(s.depth), edge_threshold)
        pr = edge_precision_recall(pred_edges, gt_edges, edge_tolerance)
        vals["edge_p"].append(pr.precision)
        vals["edge_r"].append(pr.recall)
        try:
            vals["unc"].append(uncertainty_error_ratio(res, s.depth,
                                                       fit_space=fit_space))
        except DegenerateSplit:
            pass
    unc = float(np.mean(vals["unc"])) if vals["unc"] else math.nan
    return MetricsReport(dataset=dataset, n_images=len(scenes),
                         abs_rel=float(np.mean(vals["abs_rel"])),
                         delta1=float(np.mean(vals["delta1"])),
                         rmse=float(np.mean(vals["rmse"])),
                         edge_p=float(np.mean(vals["edge_p"])),
                         edge_r=float(np.mean(vals["edge_r"])),
                         unc_ratio=unc)
