"""Scene featurisation: depth lifting, farthest point sampling, per-point MLP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ContractError, DimensionError, DomainError, ValidationError
from .geometry import CameraModel, unproject

DEFAULT_FPS_FRACTION = 0.2


@dataclass
class FeatureCloud:
    """Points in world coordinates with one feature row each."""

    positions: np.ndarray
    features: np.ndarray
    source_tags: list = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(len(self.positions), -1)
        if len(self.positions) != len(self.features):
            raise ValidationError(
                f"{len(self.positions)} positions but {len(self.features)} feature rows")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("cloud contains non-finite positions")
        if self.source_tags is None:
            self.source_tags = ["camera0"] * len(self.positions)
        elif len(self.source_tags) != len(self.positions):
            raise ValidationError("source_tags length does not match the point count")

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, indices) -> "FeatureCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureCloud(self.positions[idx], self.features[idx],
                            [self.source_tags[i] for i in idx])

    def translated(self, delta) -> "FeatureCloud":
        return FeatureCloud(self.positions + np.asarray(delta, dtype=np.float64),
                            self.features.copy(), list(self.source_tags))


def concatenate_clouds(clouds) -> FeatureCloud:
    clouds = list(clouds)
    return FeatureCloud(np.concatenate([c.positions for c in clouds]),
                        np.concatenate([c.features for c in clouds]),
                        [tag for c in clouds for tag in c.source_tags])


def lift_depth_image(depth, pixel_features, cam: CameraModel, cell: int,
                     tag: str = "camera0") -> FeatureCloud:
    """One point per ``cell x cell`` block of a depth image.

    The block's depth is the mean over its valid (> 0) pixels, its position
    the unprojection of the block centre at that depth, and its feature the
    mean of all pixel features in the block. Blocks without valid depth are
    dropped.
    """
    depth = np.asarray(depth, dtype=np.float64)
    feats = np.asarray(pixel_features, dtype=np.float64)
    if depth.ndim != 2:
        raise DimensionError(f"depth must be HxW, got {depth.shape}")
    if feats.ndim == 2:
        feats = feats[..., None]
    if feats.shape[:2] != depth.shape:
        raise DimensionError(f"depth {depth.shape} and features {feats.shape} differ in size")
    H, W = depth.shape
    if cell < 1 or H % cell or W % cell:
        raise DimensionError(f"cell {cell} does not divide image size {H}x{W}")
    gh, gw = H // cell, W // cell
    d = depth.reshape(gh, cell, gw, cell)
    valid = d > 0
    count = valid.sum(axis=(1, 3))
    dsum = np.where(valid, d, 0.0).sum(axis=(1, 3))
    keep = count > 0
    mean_depth = np.divide(dsum, count, out=np.zeros_like(dsum), where=keep)
    f = feats.reshape(gh, cell, gw, cell, -1).mean(axis=(1, 3))
    rows, cols = np.nonzero(keep)
    centre = (cell - 1) / 2.0
    pixels = np.stack([cols * cell + centre, rows * cell + centre], axis=-1).astype(np.float64)
    if len(rows) == 0:
        return FeatureCloud(np.zeros((0, 3)), np.zeros((0, feats.shape[-1])), [])
    pos = unproject(pixels, mean_depth[rows, cols], cam)
    return FeatureCloud(pos, f[rows, cols], [tag] * len(rows))


def farthest_point_sample(cloud, k: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest point sampling on Euclidean positions.

    The first index is drawn uniformly with ``seed``; every later pick
    maximises the distance to the chosen set, ties going to the lowest index.
    """
    pos = cloud.positions if isinstance(cloud, FeatureCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pos)
    if not 1 <= k <= n:
        raise DomainError(f"cannot sample k={k} points from a cloud of {n}")
    first = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = first
    dist = np.linalg.norm(pos - pos[first], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))  # argmax returns the first maximum
        chosen[i] = nxt
        np.minimum(dist, np.linalg.norm(pos - pos[nxt], axis=1), out=dist)
    return chosen


def fps_count(n_points: int, fraction: float = DEFAULT_FPS_FRACTION) -> int:
    return max(1, min(n_points, int(round(fraction * n_points))))


def scene_tokens(cloud: FeatureCloud, n_points: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Farthest-point subsample of a cloud: ``(positions (n,3), attributes (n,C))``."""
    if len(cloud) == 0:
        raise ContractError("scene cloud is empty")
    idx = farthest_point_sample(cloud, min(n_points, len(cloud)), seed)
    if len(idx) < n_points:
        # pad small clouds by repeating points so batches stay rectangular
        idx = np.resize(idx, n_points)
    return cloud.positions[idx], cloud.features[idx]


# -- learnable featuriser -------------------------------------------------------
def init_featurizer(in_dim: int, out_dim: int, rng: np.random.Generator, prefix: str = "featurizer"):
    """Parameters of the shared two-layer point MLP."""
    return {
        f"{prefix}.w1": T.Tensor(rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, out_dim)), requires_grad=True),
        f"{prefix}.b1": T.Tensor(np.zeros(out_dim), requires_grad=True),
        f"{prefix}.w2": T.Tensor(rng.normal(0, 1 / np.sqrt(out_dim), (out_dim, out_dim)), requires_grad=True),
        f"{prefix}.b2": T.Tensor(np.zeros(out_dim), requires_grad=True),
    }


def featurize_points(raw, params, prefix: str = "featurizer") -> T.Tensor:
    """Apply ``w2 . gelu(w1 . x + b1) + b2`` to every point's attributes."""
    raw = T.as_tensor(raw)
    w1 = params[f"{prefix}.w1"]
    if raw.shape[-1] != w1.shape[0]:
        raise DimensionError(f"point attributes have width {raw.shape[-1]}, featurizer expects {w1.shape[0]}")
    h = T.gelu(T.linear(raw, w1, params[f"{prefix}.b1"]))
    return T.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])
