import itertools

import numpy as np
import pytest

from interxfer import geomkit
from interxfer.geomkit import AnalyticShape, PointCloud, Primitive
from interxfer.util import GeometryError, ShapeMismatchError


def unit_sphere():
    return AnalyticShape(primitives=[Primitive(kind="sphere", size=(1.0,))])


def brute_force_delaunay(points):
    """Edges of every tetrahedron whose circumsphere contains no other point."""
    edges = set()
    n = len(points)
    for tet in itertools.combinations(range(n), 4):
        corners = points[list(tet)]
        a = 2 * (corners[1:] - corners[0])
        b = (corners[1:] ** 2).sum(axis=1) - (corners[0] ** 2).sum()
        if abs(np.linalg.det(a)) < 1e-12:
            continue
        centre = np.linalg.solve(a, b)
        radius = np.linalg.norm(corners[0] - centre)
        others = [k for k in range(n) if k not in tet]
        if all(np.linalg.norm(points[k] - centre) > radius + 1e-9 for k in others):
            edges.update((i, j) for i, j in itertools.combinations(tet, 2))
    return edges


# --------------------------------------------------------------------------------------
# Shapes and SDFs
# --------------------------------------------------------------------------------------


def test_sphere_sdf():
    shape = unit_sphere()
    assert geomkit.sdf_analytic(shape, [0.0, 0.0, 0.0]) == pytest.approx(-1.0)
    assert geomkit.sdf_analytic(shape, [2.0, 0.0, 0.0]) == pytest.approx(1.0)
    assert geomkit.sdf_analytic(shape, [0.0, 1.0, 0.0]) == pytest.approx(0.0)


def test_box_sdf_inside_and_outside():
    shape = AnalyticShape(primitives=[Primitive(kind="box", size=(1.0, 2.0, 3.0))])
    assert geomkit.sdf_analytic(shape, [0.0, 0.0, 0.0]) == pytest.approx(-1.0)
    assert geomkit.sdf_analytic(shape, [2.0, 3.0, 0.0]) == pytest.approx(np.sqrt(2.0))


def test_union_is_minimum():
    shape = AnalyticShape(
        primitives=[
            Primitive(kind="sphere", size=(0.5,), center=(-1.0, 0.0, 0.0)),
            Primitive(kind="sphere", size=(0.5,), center=(1.0, 0.0, 0.0)),
        ]
    )
    assert geomkit.sdf_analytic(shape, [0.0, 0.0, 0.0]) == pytest.approx(0.5)
    assert geomkit.sdf_analytic(shape, [1.0, 0.0, 0.0]) == pytest.approx(-0.5)


def test_degenerate_primitive_is_rejected():
    with pytest.raises(ValueError):
        Primitive(kind="sphere", size=(0.0,))


@pytest.mark.parametrize("family", ["mug", "chair"])
def test_generated_shapes_fit_unit_box(family):
    shape = geomkit.generate_shape(family, seed=11)
    low, high = shape.bounds()
    assert (high - low).max() == pytest.approx(1.0)
    assert np.allclose((low + high) / 2, 0.0, atol=1e-12)


def test_generation_is_deterministic():
    assert geomkit.generate_shape("mug", seed=5) == geomkit.generate_shape("mug", seed=5)
    assert geomkit.generate_shape("mug", seed=5) != geomkit.generate_shape("mug", seed=6)


def test_out_of_range_parameter_is_rejected():
    with pytest.raises(GeometryError):
        geomkit.generate_shape("mug", {"body_radius": 5.0})


def test_mug_has_handle_label(mug):
    labels = [p.label for p in mug.primitives]
    assert labels == ["body", "handle"]


def test_unknown_family_is_rejected():
    with pytest.raises(GeometryError):
        geomkit.generate_shape("teapot")


def test_sphere_bounds():
    low, high = unit_sphere().bounds()
    assert np.allclose(low, -1.0) and np.allclose(high, 1.0)
    moved = AnalyticShape(primitives=[Primitive(kind="sphere", center=(2.0, 0.0, 0.0), size=(0.5,))])
    normalized = geomkit.normalize(moved)
    assert np.allclose(normalized.bounds()[0], -0.5)
    assert np.allclose(normalized.bounds()[1], 0.5)


def test_armrests_change_the_solid():
    with_arms = geomkit.generate_shape("chair", {"armrests": True}, seed=2)
    without = geomkit.generate_shape("chair", {"armrests": False}, seed=2)
    centre = geomkit.armrest_centroid(with_arms)
    assert geomkit.armrest_centroid(without) is None
    assert geomkit.sdf_analytic(with_arms, centre) < 0
    assert geomkit.sdf_analytic(without, centre) > 0


# --------------------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------------------


def test_surface_samples_lie_on_surface(mug, mug_cloud):
    shape = mug.translated(-mug_cloud.center)
    assert len(mug_cloud) == 256
    assert np.abs(shape.sdf(mug_cloud.points)).max() < geomkit.SURFACE_TOL
    assert np.allclose(mug_cloud.points.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(np.linalg.norm(mug_cloud.normals, axis=1), 1.0)


def test_sphere_normals_point_outward():
    cloud = geomkit.sample_surface(unit_sphere(), 200, seed=1)
    radial = cloud.points + cloud.center
    assert np.allclose(cloud.normals, radial / np.linalg.norm(radial, axis=1, keepdims=True), atol=1e-5)


def test_surface_labels_follow_primitives(mug, mug_cloud):
    handle = geomkit.LABELS.index("handle")
    body = geomkit.LABELS.index("body")
    assert set(np.unique(mug_cloud.labels)) == {handle, body}


def test_every_part_is_sampled():
    mug = geomkit.generate_shape("mug", seed=0)
    cloud = geomkit.sample_surface(mug, 2048, seed=0)
    handle = np.mean(cloud.labels == geomkit.LABELS.index("handle"))
    area_share = mug.primitives[1].area() / sum(p.area() for p in mug.primitives)
    assert 0.02 < handle <= area_share + 0.02
    chair = geomkit.generate_shape("chair", {"armrests": False}, seed=0)
    labels = geomkit.sample_surface(chair, 2048, seed=0).labels
    assert {geomkit.LABELS[k] for k in np.unique(labels)} == {"seat", "back", "leg"}


def test_sampling_is_deterministic(mug):
    first = geomkit.sample_surface(mug, 64, seed=9)
    second = geomkit.sample_surface(mug, 64, seed=9)
    assert np.array_equal(first.points, second.points)


def test_point_cloud_rejects_bad_normals():
    with pytest.raises(GeometryError):
        PointCloud(np.zeros((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeMismatchError):
        PointCloud(np.zeros((2, 3)), np.eye(3))


def test_grid_is_inclusive_and_ordered():
    grid = geomkit.sample_grid((np.zeros(3), np.ones(3)), 3)
    assert grid.shape == (27, 3)
    assert np.allclose(grid[0], 0.0)
    assert np.allclose(grid[-1], 1.0)
    assert np.allclose(grid[1], [0.0, 0.0, 0.5])
    assert geomkit.grid_spacing((np.zeros(3), np.ones(3)), 3) == pytest.approx(0.5)


def test_grid_rejects_flat_box():
    with pytest.raises(GeometryError):
        geomkit.sample_grid((np.zeros(3), np.array([1.0, 0.0, 1.0])), 4)


def test_lattice_bounds_scale_about_centre():
    low, high = geomkit.lattice_bounds(np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 4.0]]))
    assert np.allclose(low, [-0.1, -0.2, -0.4])
    assert np.allclose(high, [1.1, 2.2, 4.4])


# --------------------------------------------------------------------------------------
# Delaunay
# --------------------------------------------------------------------------------------


def test_tetrahedron_with_centroid_connects_centroid_to_all():
    corners = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    points = np.vstack([corners, corners.mean(axis=0)])
    edges = geomkit.delaunay_edges(points).as_set()
    assert {(k, 4) for k in range(4)} <= edges


@pytest.mark.parametrize("seed", range(5))
def test_delaunay_matches_circumsphere_oracle(seed):
    points = np.random.default_rng(seed).uniform(-1, 1, size=(10, 3))
    assert geomkit.delaunay_edges(points).as_set() == brute_force_delaunay(points)


def test_delaunay_lengths_use_original_points():
    points = np.random.default_rng(3).uniform(size=(8, 3))
    edges = geomkit.delaunay_edges(points)
    expected = np.linalg.norm(points[edges.pairs[:, 0]] - points[edges.pairs[:, 1]], axis=1)
    assert np.allclose(edges.lengths, expected)


def test_delaunay_survives_cospherical_input():
    cube = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
    edges = geomkit.delaunay_edges(cube)
    pairs = edges.as_set()
    gaps = {pair: np.abs(cube[pair[0]] - cube[pair[1]]).sum() for pair in pairs}
    # All 12 sides, one diagonal per face, and at most one body diagonal.
    assert sum(g == 1 for g in gaps.values()) == 12
    assert sum(g == 2 for g in gaps.values()) == 6
    assert sum(g == 3 for g in gaps.values()) <= 1
    centre = np.full(3, 0.5)
    for tet in edges.tetrahedra:
        corners = cube[tet]
        volume = abs(np.linalg.det(corners[1:] - corners[0])) / 6
        assert volume > 1e-9
        # Every tetrahedron shares the cube's circumsphere, which holds no point inside.
        assert np.allclose(np.linalg.norm(corners - centre, axis=1), np.sqrt(3) / 2)
    total = sum(abs(np.linalg.det(cube[t][1:] - cube[t][0])) / 6 for t in edges.tetrahedra)
    assert total == pytest.approx(1.0)
    faces = [frozenset(k for k in range(8) if cube[k, axis] == side) for axis in range(3) for side in (0, 1)]
    for face in faces:
        assert sum(1 for (i, j) in pairs if {i, j} <= face and gaps[(i, j)] == 2) == 1


def test_delaunay_needs_four_points():
    with pytest.raises(GeometryError):
        geomkit.delaunay_edges(np.zeros((3, 3)))


# --------------------------------------------------------------------------------------
# Rotations and nearest neighbours
# --------------------------------------------------------------------------------------


def test_rotation_aligning_maps_a_to_b(rng):
    a = rng.normal(size=(20, 3))
    b = rng.normal(size=(20, 3))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    rotations = geomkit.rotations_aligning(a, b)
    assert np.allclose(np.einsum("nij,nj->ni", rotations, a), b, atol=1e-12)
    assert all(geomkit.is_rotation(r) for r in rotations)


def test_rotation_aligning_special_cases():
    x = np.array([1.0, 0.0, 0.0])
    assert np.allclose(geomkit.rotation_aligning(x, x), np.eye(3))
    flipped = geomkit.rotation_aligning(x, -x)
    assert np.allclose(flipped @ x, -x)
    assert geomkit.is_rotation(flipped)


def test_rotation_aligning_round_trip(rng):
    a = rng.normal(size=(20, 3))
    b = rng.normal(size=(20, 3))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    there = geomkit.rotations_aligning(a, b)
    back = geomkit.rotations_aligning(b, a)
    assert np.allclose(back @ there, np.eye(3), atol=1e-10)


def test_random_rotations_average_to_zero():
    mean = np.mean([geomkit.random_rotation(seed) for seed in range(2000)], axis=0)
    assert np.abs(mean).max() < 0.06


def test_random_rotation_is_seeded():
    assert np.array_equal(geomkit.random_rotation(4), geomkit.random_rotation(4))
    assert geomkit.is_rotation(geomkit.random_rotation(4))


def test_nearest_matches_brute_force(rng):
    reference = rng.uniform(size=(200, 3))
    queries = rng.uniform(size=(50, 3))
    gaps = np.linalg.norm(queries[:, None] - reference[None], axis=-1)
    assert np.array_equal(geomkit.nearest(queries, reference), gaps.argmin(axis=1))


def test_nearest_ties_go_to_lowest_index():
    reference = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 0]])
    assert geomkit.nearest(np.zeros(3), reference)[0] == 0
    assert geomkit.nearest(np.array([[2.0, 0, 0]]), reference)[0] == 0


def test_nearest_ties_beyond_a_few_candidates():
    shell = np.array(
        [p for p in itertools.product(range(-5, 6), repeat=3) if np.dot(p, p) == 25], dtype=float
    )
    assert len(shell) == 30
    rng = np.random.default_rng(0)
    for _ in range(20):
        reference = shell[rng.permutation(len(shell))]
        index, dist = geomkit.nearest(np.zeros((1, 3)), reference, return_distance=True)
        assert index[0] == 0
        assert dist[0] == pytest.approx(5.0)


def test_nearest_single_reference():
    index, dist = geomkit.nearest(np.ones((4, 3)), np.zeros((1, 3)), return_distance=True)
    assert np.array_equal(index, np.zeros(4))
    assert np.allclose(dist, np.sqrt(3))


def test_nearest_empty_reference_fails():
    with pytest.raises(GeometryError):
        geomkit.nearest(np.zeros(3), np.zeros((0, 3)))


# --------------------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------------------


def test_ply_keeps_labels(fs, mug_cloud):
    fs.create_dir("/out")
    geomkit.write_ply("/out/mug.ply", mug_cloud.points, mug_cloud.normals, mug_cloud.labels)
    loaded = geomkit.read_ply("/out/mug.ply")
    assert np.allclose(loaded.points, mug_cloud.points, atol=1e-8)
    assert np.array_equal(loaded.labels, mug_cloud.labels)


def test_obj_vertices(fs):
    fs.create_dir("/out")
    points = np.arange(12.0).reshape(4, 3)
    geomkit.write_obj("/out/points.obj", points)
    assert np.allclose(geomkit.read_obj("/out/points.obj"), points)
