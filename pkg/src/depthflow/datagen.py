"""Procedural synthetic scenes with analytic ground-truth depth.

A scene is a perspective floor plane plus a handful of fronto-parallel boxes
and ellipses at random depths with nearest-wins occlusion. The image is a
Lambertian-like shading of the depth, so the image carries the depth cue the
network has to learn. Depth normalization follows the 2%/98% percentile
scheme with a log or linear transform.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import AllInvalid, BadSize, DegenerateQuantiles

INVALID_SENTINEL = -1.0  # stored in DepthGrid.values where valid is False

GROUND_TRUTH = "ground_truth"
PSEUDO_LABEL = "pseudo_label"


@dataclass
class DepthGrid:
    """Metric depth in meters with a validity mask (invalid = no geometry)."""

    values: np.ndarray   # (H, W) float32, > 0 where valid
    valid: np.ndarray    # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise BadSize(f"depth {self.values.shape} vs mask {self.valid.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def copy(self) -> "DepthGrid":
        return DepthGrid(self.values.copy(), self.valid.copy())

    @classmethod
    def full_valid(cls, values: np.ndarray) -> "DepthGrid":
        values = np.asarray(values, dtype=np.float32)
        return cls(values, np.ones(values.shape, dtype=bool))


@dataclass
class Scene:
    """A paired image/depth sample."""

    image: np.ndarray                    # (C, H, W), values in [-1, 1]
    depth: DepthGrid
    normalized_depth: np.ndarray | None  # (1, H, W) in [-1, 1], set once
                                         # quantiles are known
    source: str                          # GROUND_TRUTH or PSEUDO_LABEL

    @property
    def hw(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class DatasetQuantiles:
    """2% / 98% depth quantiles of a dataset, with the normalization kind."""

    d2: float
    d98: float
    fn_kind: str = "log"   # "log" or "linear"

    def __post_init__(self):
        if not (0.0 < self.d2):
            raise DegenerateQuantiles(f"d2={self.d2} must be positive")
        if not (self.d2 < self.d98):
            raise DegenerateQuantiles(f"require d2 < d98, got {self.d2}, {self.d98}")
        if self.fn_kind not in ("log", "linear"):
            raise ValueError(f"unknown fn_kind {self.fn_kind!r}")

    def fn(self, d: np.ndarray) -> np.ndarray:
        return np.log(d) if self.fn_kind == "log" else np.asarray(d, dtype=np.float64)

    def fn_inv(self, v: np.ndarray) -> np.ndarray:
        return np.exp(v) if self.fn_kind == "log" else v


def generate_scene(seed: int, size: tuple[int, int] = (32, 32),
                   difficulty: str = "standard", channels: int = 1) -> Scene:
    """Deterministic synthetic scene from a seed.

    Floor plane with perspective depth and 2-6 boxes/ellipses with
    nearest-wins occlusion. The image is Lambertian shading
    albedo/(1 + 0.15*depth) attenuated toward a bright per-scene air light
    (Koschmieder haze), so distant pixels read brighter, plus pixel noise
    (sigma 0.02); values are mapped to [-1, 1] and clipped. With probability
    0.3 the rows above the horizon are invalid ("sky") and render as pure
    air light.
    """
    h, w = size
    if h < 16 or w < 16 or h % 4 or w % 4:
        raise BadSize(f"size {h}x{w}: need H, W >= 16 and divisible by 4")
    if difficulty not in ("easy", "standard"):
        raise ValueError(f"unknown difficulty {difficulty!r}")

    rng = np.random.default_rng(seed)
    z_near = rng.uniform(0.8, 1.6)
    z_far = rng.uniform(14.0, 30.0)
    horizon = int(rng.uniform(0.05, 0.35) * h)

    rows = np.arange(h, dtype=np.float64)
    depth = np.full((h, w), z_far, dtype=np.float64)
    below = rows > horizon
    # hyperbolic floor: z_near at the bottom row, growing toward the horizon
    depth[below, :] = (z_near * (h - 1 - horizon) /
                       (rows[below] - horizon))[:, None]
    depth = np.minimum(depth, z_far)

    valid = np.ones((h, w), dtype=bool)
    sky = difficulty == "standard" and rng.uniform() < 0.3
    if sky:
        valid[:horizon + 1, :] = False

    albedo = np.full((h, w), rng.uniform(0.2, 0.7))
    n_objects = rng.integers(2, 4) if difficulty == "easy" else rng.integers(2, 7)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_objects):
        z_obj = rng.uniform(1.0, 15.0)
        cy, cx = rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w
        ry = rng.uniform(0.08, 0.3) * h
        rx = rng.uniform(0.08, 0.3) * w
        if rng.uniform() < 0.5:  # box
            region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:                    # ellipse
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        occupied = np.where(valid, depth, np.inf)
        front = region & (z_obj < occupied)
        depth[front] = z_obj
        valid[front] = True
        albedo[front] = rng.uniform(0.1, 0.75)

    air_light = rng.uniform(0.9, 1.0)
    transmittance = 1.0 / (1.0 + 0.15 * np.where(valid, depth, z_far))
    intensity = albedo * transmittance + air_light * (1.0 - transmittance)
    intensity[~valid] = air_light  # sky: infinite distance, pure air light
    image = 2.0 * (intensity + rng.normal(0.0, 0.02, size=(h, w))) - 1.0
    image = np.clip(image, -1.0, 1.0).astype(np.float32)
    image = np.repeat(image[None], channels, axis=0)

    values = np.where(valid, depth, INVALID_SENTINEL).astype(np.float32)
    return Scene(image=image, depth=DepthGrid(values, valid),
                 normalized_depth=None, source=GROUND_TRUTH)


def compute_quantiles(scenes, fn_kind: str = "log") -> DatasetQuantiles:
    """2%/98% percentiles over the valid pixels of a scene collection."""
    pools = [s.depth.values[s.depth.valid] for s in scenes]
    allv = np.concatenate(pools) if pools else np.empty(0)
    if allv.size == 0:
        raise AllInvalid("no valid pixels in dataset")
    d2, d98 = np.percentile(allv.astype(np.float64), [2.0, 98.0])
    if not d2 < d98:
        raise DegenerateQuantiles(f"quantiles collapse: d2={d2}, d98={d98}")
    return DatasetQuantiles(float(d2), float(d98), fn_kind)


def normalize_depth(d: DepthGrid, q: DatasetQuantiles) -> np.ndarray:
    """Map metric depth to [-1, 1] via ((Fn(d)-Fn(d2))/(Fn(d98)-Fn(d2)) - 0.5)*2.

    Invalid pixels are nearest-neighbor filled first, so the result is dense.
    """
    filled = fill_invalid(d) if not d.valid.all() else d
    v = filled.values.astype(np.float64)
    lo, hi = q.fn(np.asarray(q.d2)), q.fn(np.asarray(q.d98))
    if hi == lo:
        raise DegenerateQuantiles("Fn(d2) == Fn(d98)")
    nd = (q.fn(np.maximum(v, 1e-12)) - lo) / (hi - lo)
    nd = (nd - 0.5) * 2.0
    return np.clip(nd, -1.0, 1.0).astype(np.float32)[None]


def denormalize_depth(nd: np.ndarray, q: DatasetQuantiles) -> DepthGrid:
    """Exact algebraic inverse of normalize_depth, clamped to [d2, d98]."""
    arr = np.asarray(nd, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0]
    arr = np.clip(arr, -1.0, 1.0)
    lo, hi = q.fn(np.asarray(q.d2)), q.fn(np.asarray(q.d98))
    if hi == lo:
        raise DegenerateQuantiles("Fn(d2) == Fn(d98)")
    v = q.fn_inv(lo + (arr / 2.0 + 0.5) * (hi - lo))
    v = np.clip(v, q.d2, q.d98)
    return DepthGrid.full_valid(v.astype(np.float32))


def nearest_valid_fill(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Fill invalid entries with the nearest valid value (Euclidean distance,
    ties broken by row-major order of the valid pixels)."""
    if valid.all():
        return values.copy()
    if not valid.any():
        raise AllInvalid("grid has no valid pixel")
    h, w = values.shape
    vy, vx = np.nonzero(valid)        # row-major order
    iy, ix = np.nonzero(~valid)
    out = values.copy()
    # chunk the invalid pixels so the distance matrix stays small
    seeds = np.stack([vy, vx], axis=1).astype(np.float64)
    for start in range(0, iy.size, 4096):
        sl = slice(start, start + 4096)
        pts = np.stack([iy[sl], ix[sl]], axis=1).astype(np.float64)
        d2 = ((pts[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argmin(d2, axis=1)  # first minimum = row-major tie-break
        out[iy[sl], ix[sl]] = values[vy[nearest], vx[nearest]]
    return out


def fill_invalid(d: DepthGrid) -> DepthGrid:
    """Dense copy of `d` with every invalid pixel taken from its nearest
    valid neighbor. Idempotent; valid pixels are untouched."""
    filled = nearest_valid_fill(d.values, d.valid)
    return DepthGrid.full_valid(filled)


def attach_normalized(scene: Scene, q: DatasetQuantiles) -> Scene:
    """Scene with normalized_depth computed under `q`."""
    return replace(scene, normalized_depth=normalize_depth(scene.depth, q))


def flow_source(image: np.ndarray) -> np.ndarray:
    """The 1-channel flow starting state for an image: the image itself, or
    its channel mean when the image has several channels."""
    if image.ndim != 3:
        raise BadSize(f"image must be CHW, got {image.shape}")
    if image.shape[0] == 1:
        return image
    return image.mean(axis=0, keepdims=True).astype(image.dtype)


def generate_dataset(seed: int, count: int, size: tuple[int, int] = (32, 32),
                     difficulty: str = "standard", channels: int = 1) -> list[Scene]:
    """`count` scenes with per-scene seeds spawned from `seed`."""
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(count)
    return [generate_scene(int(c.generate_state(1)[0]), size, difficulty, channels)
            for c in children]
