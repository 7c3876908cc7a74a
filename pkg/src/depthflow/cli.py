"""Command-line entry point: train | sample | eval | complete | diagnose.

Options resolve in three layers: registry defaults (optionally replaced by a
--preset), then a key=value config file, then explicit command-line flags.
Unknown config keys are hard errors. Exit codes: 0 success, 1 usage error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .completion import build_completion_conditioning, finetune_completion, sparsify
from .datagen import (
    compute_quantiles,
    fill_invalid,
    flow_source,
    generate_dataset,
)
from .estimators import FlowDepthEstimator, evaluate_checkpoint
from .evalkit import METRICS_HEADER, coupling_cost, rmse
from .exceptions import ConfigError, DepthflowError
from .fileio import read_ppm, write_pfm
from .flow import PRESETS, TrainConfig, prepare_scenes
from .sampler import SamplerConfig, ensemble_predict


@dataclass(frozen=True)
class ConfigKey:
    name: str            # flag/file key, dash-separated
    type: type
    default: object
    help: str
    commands: tuple[str, ...]


def _bool(s: str) -> bool:
    if s in ("true", "1", "yes"):
        return True
    if s in ("false", "0", "no"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


REGISTRY: tuple[ConfigKey, ...] = (
    ConfigKey("seed", int, 0, "master seed; all randomness derives from it",
              ("train", "sample", "eval", "complete", "diagnose")),
    ConfigKey("size", int, 32, "side length of generated square scenes",
              ("train", "eval", "complete", "diagnose")),
    ConfigKey("gt-count", int, 512, "number of ground-truth training scenes",
              ("train", "diagnose")),
    ConfigKey("steps", int, 3000, "training steps", ("train",)),
    ConfigKey("batch-size", int, 16, "training batch size", ("train", "complete",
                                                             "diagnose")),
    ConfigKey("learning-rate", float, 3e-4, "Adam learning rate",
              ("train", "complete", "diagnose")),
    ConfigKey("ema-rate", float, 0.999, "EMA decay per step", ("train",)),
    ConfigKey("sigma-min", float, 1e-8, "probability-path smoothing sigma",
              ("train", "diagnose")),
    ConfigKey("t-s", float, 0.4, "noise-augmentation level", ("train", "diagnose")),
    ConfigKey("base-width", int, 16, "UNet base channel count",
              ("train", "diagnose")),
    ConfigKey("depth-levels", int, 2, "UNet downsampling levels",
              ("train", "diagnose")),
    ConfigKey("time-embed-dim", int, 64, "time embedding width",
              ("train", "diagnose")),
    ConfigKey("teacher-ratio", float, 0.0,
              "pseudo-label ratio k (k*|GT| teacher samples mixed in)",
              ("train",)),
    ConfigKey("teacher-steps", int, 1000, "teacher training steps", ("train",)),
    ConfigKey("preset", str, "desk", "hyperparameter preset: desk or paper",
              ("train",)),
    ConfigKey("out", str, "model.ckpt", "output checkpoint path",
              ("train", "complete")),
    ConfigKey("log-file", str, "", "training log file (CSV); empty = stdout only",
              ("train", "complete", "diagnose")),
    ConfigKey("nfe", str, "4", "Euler steps; comma list for eval sweeps",
              ("sample", "eval", "diagnose")),
    ConfigKey("ensemble", int, 10, "ensemble size", ("sample", "eval")),
    ConfigKey("use-ema", _bool, True, "sample with EMA weights (true/false)",
              ("sample", "eval", "complete", "diagnose")),
    ConfigKey("fit-space", str, "log", "alignment space: log or linear",
              ("eval",)),
    ConfigKey("eval-seed", int, 9999, "seed for the held-out evaluation split",
              ("eval", "complete", "diagnose")),
    ConfigKey("eval-count", int, 32, "number of held-out scenes",
              ("eval", "complete", "diagnose")),
    ConfigKey("report", str, "", "metrics CSV path (appended); empty = stdout",
              ("eval",)),
    ConfigKey("keep-fraction", float, 0.02, "observed-pixel fraction",
              ("complete",)),
    ConfigKey("finetune-steps", int, 800, "completion fine-tuning steps",
              ("complete",)),
    ConfigKey("twin", _bool, False,
              "also run the image-start vs noise-start twin training",
              ("diagnose",)),
    ConfigKey("twin-steps", int, 1200, "steps per twin model", ("diagnose",)),
    ConfigKey("coupling-batch", int, 32, "scenes per coupling diagnostic batch",
              ("diagnose",)),
    ConfigKey("config", str, "", "key=value config file; flags override it",
              ("train", "sample", "eval", "complete", "diagnose")),
)

_BY_NAME = {k.name: k for k in REGISTRY}

# keys a preset may replace (only when not explicitly set by file or flag)
_PRESET_KEYS = {"batch-size": "batch_size", "learning-rate": "learning_rate",
                "ema-rate": "ema_rate", "sigma-min": "sigma_min", "t-s": "t_s"}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit code 1)."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="depthflow",
                     description="Flow-matching depth estimation on synthetic "
                                 "scenes.")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "train": "train an estimation model and write a checkpoint",
        "sample": "predict depth PFMs for PPM images",
        "eval": "evaluate a checkpoint on a held-out synthetic split",
        "complete": "fine-tune a checkpoint for sparse depth completion",
        "diagnose": "coupling-cost and starting-distribution diagnostics",
    }
    for cmd, desc in specs.items():
        p = sub.add_parser(cmd, description=desc, parents=[], prog=f"depthflow {cmd}")
        for key in REGISTRY:
            if cmd in key.commands:
                p.add_argument(f"--{key.name}", type=key.type, default=None,
                               help=f"{key.help} (default: {key.default})")
        if cmd in ("sample", "eval", "complete", "diagnose"):
            p.add_argument("checkpoint", nargs=None if cmd != "diagnose" else "?",
                           help="checkpoint path" if cmd != "diagnose"
                           else "checkpoint path (unused unless --twin)")
        if cmd == "sample":
            p.add_argument("images", nargs="+", help="input PPM image paths")
    return parser


def load_config_file(path: str) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{line_no}: expected key=value")
                key, _, raw = line.partition("=")
                key = key.strip()
                if key not in _BY_NAME:
                    raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
                try:
                    values[key] = _BY_NAME[key].type(raw.strip())
                except ValueError as e:
                    raise ConfigError(f"{path}:{line_no}: {e}") from e
        return values
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from e


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Merge registry defaults, preset, config file, and flags (flags win)."""
    flags = {k.name: getattr(args, k.name.replace("-", "_"))
             for k in REGISTRY if command in k.commands}
    file_values = {}
    config_path = flags.get("config")
    if config_path:
        file_values = load_config_file(config_path)

    opts = {k.name: k.default for k in REGISTRY if command in k.commands}
    preset_name = flags.get("preset") or file_values.get("preset") \
        or opts.get("preset")
    if command == "train":
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}")
        preset = PRESETS[preset_name]
        for key, attr in _PRESET_KEYS.items():
            opts[key] = getattr(preset, attr)
        opts["preset"] = preset_name
    opts.update(file_values)
    opts.update({k: v for k, v in flags.items() if v is not None})
    return {k.replace("-", "_"): v for k, v in opts.items()}


class _LogWriter:
    def __init__(self, path: str = ""):
        self.f = open(path, "w", encoding="utf-8") if path else None

    def __call__(self, line: str) -> None:
        print(line, flush=True)
        if self.f:
            self.f.write(line + "\n")
            self.f.flush()

    def close(self) -> None:
        if self.f:
            self.f.close()


def _parse_nfe_list(s) -> list[int]:
    try:
        out = [int(tok) for tok in str(s).split(",") if tok.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --nfe value: {e}") from e
    if not out or any(n < 1 for n in out):
        raise ConfigError("--nfe needs positive integers")
    return out


def cmd_train(o: dict) -> int:
    scenes = generate_dataset(o["seed"], o["gt_count"], (o["size"], o["size"]))
    est = FlowDepthEstimator(
        base_width=o["base_width"], depth_levels=o["depth_levels"],
        time_embed_dim=o["time_embed_dim"], steps=o["steps"],
        batch_size=o["batch_size"], learning_rate=o["learning_rate"],
        ema_rate=o["ema_rate"], sigma_min=o["sigma_min"], t_s=o["t_s"],
        teacher_ratio=o["teacher_ratio"], teacher_steps=o["teacher_steps"],
        seed=o["seed"])
    log = _LogWriter(o["log_file"])
    try:
        log(f"# preset={o['preset']} lr={o['learning_rate']} "
            f"batch={o['batch_size']} ema={o['ema_rate']} steps={o['steps']}")
        est.fit(scenes, log=log)
        log(f"# training samples: {est.n_train_scenes_}")
        est.save(o["out"])
        log(f"# checkpoint written to {o['out']}")
    finally:
        log.close()
    return 0


def _load_image_for(ckpt: Checkpoint, path: str) -> np.ndarray:
    img = read_ppm(path)
    if ckpt.net_config.cond_channels == 1:
        img = img.mean(axis=0, keepdims=True).astype(np.float32)
    return img


def cmd_sample(o: dict) -> int:
    ckpt = load_checkpoint(o["checkpoint"])
    nfe = _parse_nfe_list(o["nfe"])[0]
    cfg = SamplerConfig(nfe=nfe, ensemble_size=o["ensemble"],
                        t_s=ckpt.train_config.t_s, use_ema=o["use_ema"])
    rng = np.random.default_rng(o["seed"])
    for path in o["images"]:
        t0 = time.perf_counter()
        img = _load_image_for(ckpt, path)
        res = ensemble_predict(ckpt, img, cfg, rng)
        stem, _ = os.path.splitext(path)
        write_pfm(f"{stem}.depth.pfm", res.mean_depth.values)
        write_pfm(f"{stem}.std.pfm", res.std_depth[0])
        print(f"{path}: {(time.perf_counter() - t0) * 1000.0:.1f} ms "
              f"-> {stem}.depth.pfm, {stem}.std.pfm", flush=True)
    return 0


def cmd_eval(o: dict) -> int:
    ckpt = load_checkpoint(o["checkpoint"])
    if o["eval_seed"] == ckpt.train_config.seed:
        raise ConfigError("--eval-seed must differ from the training seed "
                          "(held-out split must be disjoint)")
    scenes = generate_dataset(o["eval_seed"], o["eval_count"],
                              (o["size"], o["size"]))
    rows = []
    for nfe in _parse_nfe_list(o["nfe"]):
        cfg = SamplerConfig(nfe=nfe, ensemble_size=o["ensemble"],
                            t_s=ckpt.train_config.t_s, use_ema=o["use_ema"])
        rep = evaluate_checkpoint(
            ckpt, scenes, cfg, np.random.default_rng(o["seed"]),
            dataset=f"synthetic_{o['eval_seed']}_nfe{nfe}_{o['fit_space']}",
            fit_space=o["fit_space"])
        rows.append(rep.csv_row())
    if o["report"]:
        new = not os.path.exists(o["report"])
        with open(o["report"], "a", encoding="utf-8") as f:
            if new:
                f.write(METRICS_HEADER + "\n")
            for r in rows:
                f.write(r + "\n")
    print(METRICS_HEADER)
    for r in rows:
        print(r)
    return 0


def cmd_complete(o: dict) -> int:
    base = load_checkpoint(o["checkpoint"])
    if o["eval_seed"] == base.train_config.seed:
        raise ConfigError("--eval-seed must differ from the training seed")
    train_scenes = prepare_scenes(
        generate_dataset(o["seed"] + 1, max(o["eval_count"] * 4, 128),
                         (o["size"], o["size"])),
        base.quantiles)
    config = TrainConfig(batch_size=o["batch_size"],
                         learning_rate=o["learning_rate"],
                         steps=o["finetune_steps"], seed=o["seed"],
                         t_s=base.train_config.t_s)
    log = _LogWriter(o["log_file"])
    try:
        completed = finetune_completion(base, train_scenes, config,
                                        keep_fraction=o["keep_fraction"],
                                        log=log)
        save_checkpoint(o["out"], completed)
        log(f"# completion checkpoint written to {o['out']}")

        held = generate_dataset(o["eval_seed"], o["eval_count"],
                                (o["size"], o["size"]))
        rng = np.random.default_rng(o["seed"])
        cfg = SamplerConfig(nfe=4, ensemble_size=1,
                            t_s=base.train_config.t_s, use_ema=o["use_ema"])
        base_errs, comp_errs = [], []
        for i, s in enumerate(held):
            base_pred = ensemble_predict(base, s.image, cfg, rng).mean_depth
            sd = sparsify(s.depth, o["keep_fraction"], seed=o["seed"] + 17 + i)
            cc = build_completion_conditioning(sd, base.quantiles)
            if o["keep_fraction"] >= 1.0 and np.all(cc.mask_distance == 0.0):
                log("# sanity: all pixels observed, distance channel is zero")
            extra = np.concatenate([cc.dense_sparse_depth, cc.mask_distance])
            comp_pred = ensemble_predict(completed, s.image, cfg, rng,
                                         extra_cond=extra).mean_depth
            base_errs.append(rmse(base_pred, s.depth))
            comp_errs.append(rmse(comp_pred, s.depth))
        log(f"base_rmse,{np.mean(base_errs):.6f}")
        log(f"completed_rmse,{np.mean(comp_errs):.6f}")
    finally:
        log.close()
    return 0


def cmd_diagnose(o: dict) -> int:
    log = _LogWriter(o["log_file"])
    try:
        scenes = generate_dataset(o["seed"], o["coupling_batch"],
                                  (o["size"], o["size"]))
        q = compute_quantiles(scenes)
        scenes = prepare_scenes(scenes, q)
        x0s = [flow_source(s.image) for s in scenes]
        x1s = [s.normalized_depth for s in scenes]
        log("diagnostic,detail,norm,value")
        for norm in ("l1", "l2"):
            for pairing in ("paired", "random", "optimal"):
                cost = coupling_cost(x0s, x1s, pairing, norm, seed=o["seed"])
                log(f"coupling,{pairing},{norm},{cost:.6f}")

        if o["twin"]:
            train_scenes = generate_dataset(o["seed"] + 5, o["gt_count"],
                                            (o["size"], o["size"]))
            held = generate_dataset(o["eval_seed"], o["eval_count"],
                                    (o["size"], o["size"]))
            for source in ("image", "noise"):
                est = FlowDepthEstimator(
                    base_width=o["base_width"], depth_levels=o["depth_levels"],
                    time_embed_dim=o["time_embed_dim"], steps=o["twin_steps"],
                    batch_size=o["batch_size"],
                    learning_rate=o["learning_rate"], sigma_min=o["sigma_min"],
                    t_s=o["t_s"], source=source, use_ema=o["use_ema"],
                    seed=o["seed"])
                est.fit(train_scenes)
                for nfe in _parse_nfe_list(o["nfe"]):
                    rep = evaluate_checkpoint(
                        est.checkpoint_, held, est.sampler_config(nfe=nfe),
                        np.random.default_rng(o["seed"]))
                    log(f"twin,{source},nfe{nfe},{rep.delta1:.6f}")
    finally:
        log.close()
    return 0


_COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "complete": cmd_complete,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        opts = resolve_options(args.command, args)
        if args.command in ("sample", "eval", "complete"):
            opts["checkpoint"] = args.checkpoint
        if args.command == "diagnose":
            opts["checkpoint"] = getattr(args, "checkpoint", None)
        if args.command == "sample":
            opts["images"] = args.images
        return _COMMANDS[args.command](opts)
    except ConfigError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DepthflowError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
