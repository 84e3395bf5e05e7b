import numpy as np
import pytest
import torch

from interxfer import geomkit, ssir
from interxfer.diffcore import DTYPE
from interxfer.util import ShapeMismatchError


def random_scene(rng, n_object=18, n_agent=12):
    object_points = rng.uniform(-1, 1, size=(n_object, 3))
    agent_points = rng.uniform(-1, 1, size=(n_agent, 3))
    normals = rng.normal(size=(n_agent, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return object_points, agent_points, normals


def dense_laplacian(graph, agent_points, object_points):
    """Laplacian coordinates as an explicit matrix product."""
    n = graph.n_object + graph.n_agent
    matrix = np.zeros((graph.n_agent, n))
    for i in range(graph.n_agent):
        matrix[i, graph.n_object + i] = 1.0
        a_idx, a_w, o_idx, o_w = graph.neighbors(i)
        for k, w in zip(a_idx, a_w):
            matrix[i, graph.n_object + k] -= w
        for j, w in zip(o_idx, o_w):
            matrix[i, j] -= w
    return matrix @ np.concatenate([object_points, agent_points])


def test_equal_lengths_give_equal_weights():
    assert np.allclose(ssir.normalized_weights([2.0, 2.0]), [0.5, 0.5])


def test_weights_are_inverse_to_length():
    assert np.allclose(ssir.normalized_weights([1.0, 3.0]), [0.75, 0.25])


def test_laplacian_of_midpoint_configuration():
    graph = ssir.InteractionGraph(
        n_object=2,
        n_agent=1,
        rows=np.array([0, 0]),
        cols=np.array([0, 1]),
        weights=np.array([0.5, 0.5]),
        delta=np.zeros((1, 3)),
        source_normals=np.array([[0.0, 0.0, 1.0]]),
    )
    object_points = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    agent_points = np.array([[0.0, 0.0, 1.0]])
    delta = ssir.laplacian_coordinate(graph, 0, agent_points, object_points)
    assert np.allclose(delta, [0.0, 0.0, 1.0])
    assert np.allclose(graph.dense() @ np.concatenate([object_points, agent_points]), [[0, 0, 1]])


def test_centroid_agent_point_sees_whole_tetrahedron():
    tetrahedron = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]])
    graph = ssir.build_interaction_graph(tetrahedron, np.zeros((1, 3)), [[0.0, 0.0, 1.0]])
    a_idx, _, o_idx, o_w = graph.neighbors(0)
    assert len(a_idx) == 0
    assert sorted(o_idx) == [0, 1, 2, 3]
    assert np.allclose(o_w, 0.25)
    assert np.allclose(graph.delta, 0.0)


def test_neighbors_out_of_range(rng):
    graph = ssir.build_interaction_graph(*random_scene(rng))
    with pytest.raises(IndexError):
        graph.neighbors(graph.n_agent)


def test_weights_sum_to_one(rng):
    graph = ssir.build_interaction_graph(*random_scene(rng))
    sums = np.bincount(graph.rows, weights=graph.weights, minlength=graph.n_agent)
    assert np.allclose(sums, 1.0, atol=1e-9)
    assert np.all(np.bincount(graph.rows, minlength=graph.n_agent) >= 1)


def test_neighbourhoods_are_delaunay_edges(rng):
    object_points, agent_points, normals = random_scene(rng)
    graph = ssir.build_interaction_graph(object_points, agent_points, normals)
    stacked = np.concatenate([object_points, agent_points])
    edges = geomkit.delaunay_edges(stacked).as_set()
    for row, col in zip(graph.rows, graph.cols):
        pair = (min(row + graph.n_object, col), max(row + graph.n_object, col))
        assert pair in edges


def test_matches_dense_oracle(rng):
    object_points, agent_points, normals = random_scene(rng)
    graph = ssir.build_interaction_graph(object_points, agent_points, normals)
    expected = dense_laplacian(graph, agent_points, object_points)
    assert np.allclose(graph.delta, expected, rtol=0, atol=1e-12)
    assert np.allclose(
        ssir.laplacian_coordinates(graph, agent_points, object_points), expected, rtol=0, atol=1e-12
    )


def test_tensor_version_matches(rng):
    object_points, agent_points, normals = random_scene(rng)
    graph = ssir.build_interaction_graph(object_points, agent_points, normals)
    moved = agent_points + rng.normal(scale=0.1, size=agent_points.shape)
    result = ssir.laplacian_tensor(graph, torch.as_tensor(moved, dtype=DTYPE), object_points)
    assert np.allclose(result.numpy(), ssir.laplacian_coordinates(graph, moved, object_points))


def test_translation_invariance(rng):
    object_points, agent_points, normals = random_scene(rng)
    graph = ssir.build_interaction_graph(object_points, agent_points, normals)
    shift = np.array([0.3, -2.0, 5.0])
    moved = ssir.laplacian_coordinates(graph, agent_points + shift, object_points + shift)
    assert np.allclose(moved, graph.delta, atol=1e-9)


def test_rotation_covariance(rng):
    object_points, agent_points, normals = random_scene(rng)
    rotation = geomkit.random_rotation(5)
    graph = ssir.build_interaction_graph(object_points, agent_points, normals)
    turned = ssir.build_interaction_graph(
        object_points @ rotation.T, agent_points @ rotation.T, normals @ rotation.T
    )
    assert np.allclose(turned.delta, graph.delta @ rotation.T, atol=1e-9)


def test_duplicate_points_are_merged(rng):
    object_points, agent_points, normals = random_scene(rng)
    agent_points[0] = object_points[3]
    graph = ssir.build_interaction_graph(object_points, agent_points, normals)
    a_idx, a_w, o_idx, o_w = graph.neighbors(0)
    assert 3 not in o_idx
    assert np.isclose(a_w.sum() + o_w.sum(), 1.0)


def test_mismatched_normals(rng):
    object_points, agent_points, normals = random_scene(rng)
    with pytest.raises(ShapeMismatchError):
        ssir.build_interaction_graph(object_points, agent_points, normals[:-1])


def test_stats(rng):
    graph = ssir.build_interaction_graph(*random_scene(rng))
    stats = graph.stats()
    assert stats["agent_points"] == 12
    assert stats["edges"] == len(graph.rows)
    assert sum(stats["degree_histogram"].values()) == 12
    assert 0 < stats["weight_min"] <= stats["weight_max"] <= 1
