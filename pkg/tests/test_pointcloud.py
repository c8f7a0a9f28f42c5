import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from keypose_diffusion import tensor as T
from keypose_diffusion.exceptions import DimensionError, DomainError
from keypose_diffusion.geometry import CameraModel
from keypose_diffusion.pointcloud import (FeatureCloud, concatenate_clouds, farthest_point_sample, featurize_points,
                                       fps_count, init_featurizer, lift_depth_image, scene_tokens)

CAM = CameraModel(1.0, 1.0, 0.0, 0.0)


def test_lift_hand_example():
    depth = np.array([[1.0, 3.0, 2.0, 2.0],
                      [0.0, 2.0, 2.0, 2.0]])
    feats = np.arange(8.0).reshape(2, 4, 1)
    cloud = lift_depth_image(depth, feats, CAM, 2)
    # left cell: valid depths 1, 3, 2 -> mean 2 at pixel centre (0.5, 0.5)
    np.testing.assert_allclose(cloud.positions[0], [1.0, 1.0, 2.0])
    np.testing.assert_allclose(cloud.positions[1], [5.0, 1.0, 2.0])
    np.testing.assert_allclose(cloud.features[:, 0], [(0 + 1 + 4 + 5) / 4, (2 + 3 + 6 + 7) / 4])


def test_lift_drops_empty_cells_and_handles_all_invalid():
    depth = np.zeros((2, 4))
    depth[0, 3] = 1.0
    cloud = lift_depth_image(depth, np.ones((2, 4, 2)), CAM, 2)
    assert len(cloud) == 1
    empty = lift_depth_image(np.zeros((2, 2)), np.ones((2, 2)), CAM, 2)
    assert len(empty) == 0 and empty.features.shape == (0, 1)


def test_lift_dimension_errors():
    with pytest.raises(DimensionError):
        lift_depth_image(np.ones((3, 4)), np.ones((3, 4)), CAM, 2)
    with pytest.raises(DimensionError):
        lift_depth_image(np.ones((2, 2)), np.ones((2, 3)), CAM, 1)


def brute_fps(pos, k, first):
    chosen = [first]
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i in range(len(pos)):
            d = min(np.linalg.norm(pos[i] - pos[j]) for j in chosen)
            if d > best_d:  # strict: keeps the lowest index on ties
                best, best_d = i, d
        chosen.append(best)
    return chosen


def test_fps_hand_example():
    pos = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0], [7, 0, 0]])
    first = int(np.random.default_rng(5).integers(4))
    assert farthest_point_sample(pos, 4, seed=5).tolist() == brute_fps(pos, 4, first)


def test_fps_ties_go_to_lowest_index():
    pos = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0]])
    seed = next(s for s in range(100) if np.random.default_rng(s).integers(4) == 0)
    assert farthest_point_sample(pos, 2, seed).tolist() == [0, 1]


@given(st.integers(2, 30), st.integers(0, 2**31 - 1))
def test_fps_matches_brute_force(n, seed):
    pos = np.random.default_rng(seed).normal(size=(n, 3))
    k = max(1, n // 3)
    first = int(np.random.default_rng(seed).integers(n))
    idx = farthest_point_sample(pos, k, seed)
    assert idx.tolist() == brute_fps(pos, k, first)
    assert len(set(idx.tolist())) == k


def test_fps_errors_and_count():
    with pytest.raises(DomainError):
        farthest_point_sample(np.zeros((3, 3)), 4)
    with pytest.raises(DomainError):
        farthest_point_sample(np.zeros((3, 3)), 0)
    assert fps_count(256) == 51 and fps_count(3) == 1


def test_cloud_helpers():
    a = FeatureCloud(np.zeros((2, 3)), np.ones((2, 4)), ["a", "a"])
    b = a.translated([1.0, 0, 0])
    c = concatenate_clouds([a, b])
    assert len(c) == 4 and c.source_tags == ["a"] * 4
    pos, attr = scene_tokens(c, 6)
    assert pos.shape == (6, 3) and attr.shape == (6, 4)


def test_featurizer_shapes_and_grads(rng):
    params = init_featurizer(5, 12, rng)
    raw = rng.normal(size=(2, 7, 5))
    assert featurize_points(raw, params).shape == (2, 7, 12)
    errs = T.check_gradients(lambda: (featurize_points(raw, params) * featurize_points(raw, params)).sum(),
                             params)
    assert max(errs.values()) < 1e-6
    with pytest.raises(DimensionError):
        featurize_points(np.ones((3, 4)), params)
