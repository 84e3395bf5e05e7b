from unittest import mock

import numpy as np
import pytest

from interxfer import geomkit, rdif, sscf
from interxfer.geomkit import PointCloud
from interxfer.util import GeometryError


@pytest.fixture()
def mug_code(mug_cloud, small_params):
    return rdif.encode(mug_cloud, small_params)


@pytest.fixture()
def other_cloud():
    return geomkit.sample_surface(geomkit.generate_shape("mug", seed=8), 200, seed=8)


def test_single_point_target(mug_cloud, mug_code, small_params):
    target = PointCloud([[0.1, 0.0, 0.0]], [[1.0, 0.0, 0.0]])
    index, residual = sscf.correspond_surface(mug_cloud, mug_code, target, mug_code, small_params)
    assert np.array_equal(index, np.zeros(len(mug_cloud), dtype=index.dtype))
    assert np.all(residual >= 0)


def test_empty_target(mug_cloud, mug_code, small_params):
    target = PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(GeometryError):
        sscf.correspond_surface(mug_cloud, mug_code, target, mug_code, small_params)


def test_residual_is_nearest_template_distance(mug_cloud, mug_code, other_cloud, small_params):
    code_t = rdif.encode(other_cloud, small_params)
    index, residual = sscf.correspond_surface(mug_cloud, mug_code, other_cloud, code_t, small_params)
    source = sscf.to_template(mug_cloud.points, mug_code, small_params)
    target = sscf.to_template(other_cloud.points, code_t, small_params)
    gaps = np.linalg.norm(source[:, None] - target[None], axis=2)
    assert np.allclose(residual, gaps.min(axis=1))
    assert np.allclose(gaps[np.arange(len(index)), index], residual)


def test_self_correspondence_is_identity(mug_cloud, mug_code, small_params):
    index, residual = sscf.correspond_surface(mug_cloud, mug_code, mug_cloud, mug_code, small_params)
    assert np.array_equal(index, np.arange(len(mug_cloud)))
    assert np.allclose(residual, 0.0)


def test_correspondence_survives_target_rotation(mug_cloud, mug_code, small_params):
    rotation = geomkit.random_rotation(2)
    turned = mug_cloud.rotated(rotation)
    code_t = rdif.encode(turned, small_params)
    index, _ = sscf.correspond_surface(mug_cloud, mug_code, turned, code_t, small_params)
    assert np.mean(index == np.arange(len(mug_cloud))) > 0.95


def test_grid_covers_target(other_cloud, mug_code, small_params):
    grid = sscf.template_grid(other_cloud, mug_code, 5, small_params)
    low, high = grid.bounds
    assert grid.points.shape == (125, 3)
    assert grid.images.shape == (125, 3)
    assert np.all(grid.points >= low - 1e-12) and np.all(grid.points <= high + 1e-12)
    assert np.all(low <= other_cloud.points.min(axis=0))
    assert np.isclose(grid.spacing, geomkit.grid_spacing(grid.bounds, 5))


def test_grid_uses_cache(other_cloud, mug_code, small_params):
    cache = mock.Mock()
    cache.get.side_effect = lambda key, compute: compute()
    grid = sscf.template_grid(other_cloud, mug_code, 4, small_params, cache=cache, key="abc")
    cache.get.assert_called_once()
    assert cache.get.call_args[0][0] == "abc"
    assert grid.images.shape == (64, 3)


def test_spatial_self_correspondence_returns_lattice(mug_cloud, mug_code, small_params):
    grid = sscf.template_grid(mug_cloud, mug_code, 4, small_params)
    agent_points = grid.points[[0, 21, 42, 63]] + mug_cloud.center
    corr = sscf.correspond(
        mug_cloud, mug_code, agent_points, mug_cloud, mug_code, 4, small_params
    )
    assert np.array_equal(corr.spatial_index, [0, 21, 42, 63])
    assert np.allclose(corr.spatial, agent_points)
    assert np.allclose(corr.corresponded_object(mug_cloud), mug_cloud.points + mug_cloud.center)


def test_frames_share_surface_matches(mug_cloud, mug_code, other_cloud, small_params, rng):
    code_t = rdif.encode(other_cloud, small_params)
    frames = [rng.uniform(-0.2, 0.2, size=(10, 3)) for _ in range(3)]
    result = sscf.correspond_frames(
        mug_cloud, mug_code, frames, other_cloud, code_t, 4, small_params
    )
    assert len(result) == 3
    assert all(np.array_equal(r.surface, result[0].surface) for r in result)
    single = sscf.correspond(mug_cloud, mug_code, frames[1], other_cloud, code_t, 4, small_params)
    assert np.allclose(single.spatial, result[1].spatial)


def test_correspondence_table(mug_cloud, mug_code, small_params, fs):
    fs.create_dir("/out")
    corr = sscf.correspond(
        mug_cloud, mug_code, np.zeros((5, 3)), mug_cloud, mug_code, 3, small_params
    )
    table = sscf.correspondence_table(corr)
    assert list(table.columns) == ["kind", "index", "target", "x", "y", "z", "residual"]
    assert (table["kind"] == "surface").sum() == len(mug_cloud)
    assert (table["kind"] == "spatial").sum() == 5
    sscf.write_correspondence("/out/corr.csv", corr)
    with open("/out/corr.csv") as reader:
        assert reader.readline().strip() == "kind,index,target,x,y,z,residual"
