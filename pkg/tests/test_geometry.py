import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mscn.geometry import (CloudSet, DatasetManifest, GeometryError, PointCloud, Placement,
                           Transform, decimate_channels, downsample_indices, elevation,
                           generate_primitive, knn, knn_batch, knn_indices, load_dataset,
                           load_manifest, load_xyz, random_downsample, rotate_z, save_manifest,
                           save_xyz, scale, shift_random, translate)

from conftest import brute_knn


# --- PointCloud -----------------------------------------------------------

def test_pointcloud_rejects_bad_input():
    with pytest.raises(GeometryError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(GeometryError, match="invalid coordinates"):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(GeometryError):
        PointCloud(np.zeros((4, 3)), features=np.zeros((3, 2)))


# --- kNN ------------------------------------------------------------------

def test_knn_unit_square_picks_edge_neighbors():
    pts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    fields = knn(pts, 2)
    for f in fields:
        assert f.center_index not in f.neighbor_indices
        np.testing.assert_array_equal(f.distances, [1.0, 1.0])
    assert sorted(fields[0].neighbor_indices) == [1, 3]
    assert sorted(fields[2].neighbor_indices) == [1, 3]


def test_knn_fields_are_consistent(rng):
    pts = rng.normal(size=(50, 3))
    for f in knn(pts, 3):
        assert len(f.neighbor_indices) == 3
        np.testing.assert_array_equal(f.directions, pts[f.neighbor_indices] - pts[f.center_index])
        np.testing.assert_array_equal(f.distances, np.linalg.norm(f.directions, axis=1))


def test_knn_errors():
    with pytest.raises(GeometryError, match="insufficient points"):
        knn(np.zeros((3, 3)), 3)
    with pytest.raises(GeometryError, match="invalid coordinates"):
        knn(np.array([[0, 0, np.inf]] * 5), 3)
    with pytest.raises(GeometryError, match="insufficient points"):
        knn_batch(torch.zeros(1, 3, 3, dtype=torch.float64), 3)


def test_knn_tie_break_smaller_index():
    # center at origin with six neighbors all at distance 1
    pts = np.array([[0, 0, 0], [0, 0, 1], [0, 1, 0], [1, 0, 0],
                    [-1, 0, 0], [0, -1, 0], [0, 0, -1]], dtype=float)
    assert knn_indices(pts, 3)[0].tolist() == [1, 2, 3]
    assert knn_batch(torch.from_numpy(pts)[None], 3)[0, 0].tolist() == [1, 2, 3]


def test_knn_batch_matches_oracle_on_grid_ties():
    # integer lattice: massive ties that reach beyond the candidate window
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    got = knn_batch(torch.from_numpy(g)[None], 3)[0].numpy()
    np.testing.assert_array_equal(got, brute_knn(g, 3))


@settings(max_examples=25, deadline=None)
@given(st.integers(5, 120), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_knn_batch_matches_numpy_property(n, M, seed):
    if n <= M:
        return
    pts = np.random.default_rng(seed).normal(size=(2, n, 3)) * 10 + 100
    got = knn_batch(torch.from_numpy(pts), M).numpy()
    for b in range(2):
        np.testing.assert_array_equal(got[b], knn_indices(pts[b], M))


def test_knn_permutation_equivariant(rng):
    pts = rng.normal(size=(80, 3))
    perm = rng.permutation(80)
    base = knn_indices(pts, 3)
    permuted = knn_indices(pts[perm], 3)
    inv = np.argsort(perm)
    # neighbors of new row i are old neighbors of perm[i], relabelled
    for i in range(80):
        assert sorted(perm[permuted[i]].tolist()) == sorted(base[perm[i]].tolist())
    assert inv.shape == (80,)


def test_translation_leaves_fields_unchanged(rng):
    c = PointCloud(rng.normal(size=(60, 3)))
    a = knn(c.points, 3)
    b = knn(translate(c, [3.0, -2.0, 7.5]).points, 3)
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.neighbor_indices, fb.neighbor_indices)
        np.testing.assert_allclose(fa.directions, fb.directions, atol=1e-12)


def test_scaling_scales_distances_keeps_cosines(rng):
    c = PointCloud(rng.normal(size=(60, 3)))
    a = knn(c.points, 3)
    b = knn(scale(c, 7.0).points, 3)
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.neighbor_indices, fb.neighbor_indices)
        np.testing.assert_allclose(fb.distances, 7.0 * fa.distances, rtol=1e-12)
        ua = fa.directions / fa.distances[:, None]
        ub = fb.directions / fb.distances[:, None]
        np.testing.assert_allclose(ua @ ua.T, ub @ ub.T, atol=1e-12)


# --- sampling -------------------------------------------------------------

def test_random_downsample_counts_and_determinism(rng):
    c = PointCloud(rng.normal(size=(1024, 3)), features=np.arange(1024)[:, None])
    out = random_downsample(c, 4, 5)
    assert len(out) == 256
    np.testing.assert_array_equal(out.points, c.points[out.features[:, 0]])
    c100 = PointCloud(rng.normal(size=(100, 3)))
    a, b = random_downsample(c100, 3, 9), random_downsample(c100, 3, 9)
    assert len(a) == 33
    np.testing.assert_array_equal(a.points, b.points)


def test_downsample_without_replacement_and_near_identity():
    # just above 1 the count is floor(N / r) = N - 1, all distinct
    idx = downsample_indices(50, 1 + 1e-9, 3)
    assert len(idx) == 49 and len(set(idx.tolist())) == 49
    idx = downsample_indices(1000, 2.5, 3)
    assert len(set(idx.tolist())) == len(idx) == 400


def test_downsample_ids_follow_permutation():
    perm = np.random.default_rng(0).permutation(64)
    base = downsample_indices(64, 4, 11)
    moved = downsample_indices(64, 4, 11, ids=perm)
    np.testing.assert_array_equal(perm[moved], base)


def test_downsample_errors():
    with pytest.raises(GeometryError, match="insufficient points after sampling"):
        downsample_indices(10, 4, 0, min_points=4)
    with pytest.raises(GeometryError):
        downsample_indices(10, 1.0, 0)


# --- transforms -----------------------------------------------------------

def test_transforms(rng):
    c = PointCloud(rng.normal(size=(20, 3)), label=2)
    np.testing.assert_array_equal(rotate_z(c, 0).points, c.points)
    back = scale(scale(c, 10), 0.1)
    np.testing.assert_allclose(back.points, c.points, atol=1e-12)
    r = rotate_z(c, 90)
    np.testing.assert_allclose(r.points[:, 0], -c.points[:, 1], atol=1e-12)
    np.testing.assert_allclose(r.points[:, 2], c.points[:, 2])
    assert r.label == 2
    for s in (0.01, 100.0):
        assert np.allclose(scale(c, s).points, c.points * s)
    for bad in (0.0, -1.0):
        with pytest.raises(GeometryError, match="invalid scale"):
            scale(c, bad)


def test_shift_random_is_rigid_and_bounded(rng):
    c = PointCloud(rng.normal(size=(30, 3)))
    for seed in range(50):
        s = shift_random(c, 5.0, seed)
        v = s.points - c.points
        np.testing.assert_allclose(v, np.broadcast_to(v[0], v.shape), atol=1e-12)
        assert np.linalg.norm(v[0]) <= 5.0
    np.testing.assert_array_equal(shift_random(c, 0.0, 1).points, c.points)
    with pytest.raises(GeometryError):
        shift_random(c, -1.0, 0)


def test_transform_record_seeds_per_cloud(rng):
    c = PointCloud(rng.normal(size=(10, 3)))
    t = Transform("shift_random", 10.0, seed=3)
    assert not np.allclose(t(c, 0).points, t(c, 1).points)
    np.testing.assert_array_equal(t(c, 4).points, t(c, 4).points)
    assert Transform().describe() == "identity"


# --- decimation -----------------------------------------------------------

def test_decimate_identity_and_count():
    v = np.random.default_rng(0).normal(size=(4000, 3))
    sphere = PointCloud(v / np.linalg.norm(v, axis=1, keepdims=True))
    same = decimate_channels(sphere, 64, 1)
    np.testing.assert_array_equal(same.points, sphere.points)
    fov = (-math.pi / 2, math.pi / 2)
    counts = []
    for seed in range(5):
        v = np.random.default_rng(seed).normal(size=(2000, 3))
        c = PointCloud(v / np.linalg.norm(v, axis=1, keepdims=True))
        counts.append(len(decimate_channels(c, 64, 2, fov=fov)))
    assert abs(np.mean(counts) - 1000) <= 100


def test_decimate_keeps_even_bins_and_no_duplicates():
    c = generate_primitive(0, 1024, 3, 0.4, Placement())
    out = decimate_channels(c, 64, 2)
    e = elevation(c.points)
    lo, hi = e.min(), e.max()
    bins = np.clip(np.floor((elevation(out.points) - lo) / ((hi - lo) / 64)), 0, 63)
    assert np.all(bins % 2 == 0)
    assert len(np.unique(out.points, axis=0)) == len(out) >= 4


def test_decimate_errors():
    c = PointCloud(np.array([[1.0, 0, 0.5], [1.0, 0, 0.6]]))
    with pytest.raises(GeometryError):
        decimate_channels(c, 1, 2)
    with pytest.raises(GeometryError, match="removed all points"):
        decimate_channels(c, 4, 2, fov=(0.0, 0.1))


# --- primitives -----------------------------------------------------------

def test_primitive_determinism_and_size():
    for cid in range(3):
        a = generate_primitive(cid, 256, 42, 0.3)
        b = generate_primitive(cid, 256, 42, 0.3)
        assert a.points.tobytes() == b.points.tobytes()
        assert len(a) == 256 and a.label == cid


def test_pedestrian_is_vertical():
    for seed in range(100):
        p = generate_primitive(2, 64, seed).points
        ext = p.max(0) - p.min(0)
        assert ext[2] > max(ext[0], ext[1])


def test_closed_surface_without_occlusion():
    p = generate_primitive(0, 2000, 1).points
    c = p - p.mean(0)
    # points populate both sides of the box along every axis
    for axis in range(3):
        assert (c[:, axis] > 0).mean() > 0.3 and (c[:, axis] < 0).mean() > 0.3


def test_primitive_errors():
    with pytest.raises(GeometryError):
        generate_primitive(0, 16, 0)
    with pytest.raises(GeometryError):
        generate_primitive(0, 64, 0, 1.0)
    with pytest.raises(GeometryError):
        generate_primitive(5, 64, 0)


# --- I/O ------------------------------------------------------------------

def test_xyz_round_trip(tmp_path, rng):
    c = PointCloud(rng.normal(size=(1024, 3)) * 1e3)
    save_xyz(tmp_path / "a.xyz", c)
    back = load_xyz(tmp_path / "a.xyz")
    assert np.max(np.abs(back.points - c.points)) < 1e-9


def test_xyz_errors(tmp_path):
    (tmp_path / "empty.xyz").write_text("")
    with pytest.raises(GeometryError, match="insufficient points"):
        load_xyz(tmp_path / "empty.xyz")
    (tmp_path / "bad.xyz").write_text("1 2 3\n1 2\n")
    with pytest.raises(GeometryError, match=":2:"):
        load_xyz(tmp_path / "bad.xyz")
    with pytest.raises(FileNotFoundError):
        load_xyz(tmp_path / "missing.xyz")


def test_manifest_round_trip_and_validation(tmp_path):
    c = generate_primitive(1, 64, 0)
    save_xyz(tmp_path / "t.xyz", c)
    m = DatasetManifest([("t.xyz", 1)], seed=5, generator_params={"n": 64})
    save_manifest(tmp_path / "manifest.json", m)
    back = load_manifest(tmp_path / "manifest.json")
    assert back.to_json() == m.to_json()
    clouds = load_dataset(tmp_path / "manifest.json")
    assert clouds[0].label == 1
    with pytest.raises(GeometryError, match="unknown class id"):
        DatasetManifest([("t.xyz", 7)]).validate(tmp_path)
    doc = m.to_json()
    doc["entries"].append(["gone.xyz", 0])
    (tmp_path / "m2.json").write_text(json.dumps(doc))
    with pytest.raises(GeometryError, match="missing file"):
        load_manifest(tmp_path / "m2.json")


def test_cloudset_neighbors_and_batches():
    clouds = [generate_primitive(i % 3, 64, i) for i in range(10)]
    s = CloudSet(clouds, 3)
    assert s.points.shape == (10, 64, 3) and s.points.dtype == torch.float64
    np.testing.assert_array_equal(s.neighbors[4].numpy(), knn_indices(clouds[4].points, 3))
    seen = torch.cat(list(s.batches(4, np.random.default_rng(0))))
    assert sorted(seen.tolist()) == list(range(10))
    with pytest.raises(GeometryError):
        CloudSet([generate_primitive(0, 64, 0), generate_primitive(0, 65, 0)])
