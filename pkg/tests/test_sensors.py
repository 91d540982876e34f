import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focusnav.geometry import RigidTransform, Scene, box_mesh, build_bvh, cylinder_mesh, plane_mesh, raycast_many
from focusnav.sensors import (
    DEPTH,
    LIDAR,
    CameraIntrinsics,
    FrameMismatchError,
    LidarModel,
    PointCloud,
    SensorSuite,
    backproject,
    camera_mount,
    fuse,
    inverted_mount,
    pixel_rays,
    read_pgm,
    read_xyz,
    render_depth,
    render_lidar,
    voxel_downsample,
    write_pgm16,
    write_xyz,
)

EMPTY = Scene([])
K100 = CameraIntrinsics(100.0, 100.0, 50.0, 50.0)


def ground(size=40.0):
    return Scene([(build_bvh(plane_mesh(size)), RigidTransform())])


# -- LiDAR -------------------------------------------------------------------------

def test_single_ray_toward_wall():
    wall = Scene([(build_bvh(box_mesh((0.2, 10, 10), (2.1, 0, 0))), RigidTransform())])
    model = LidarModel(RigidTransform(), azimuth_samples=1, elevation_range=(0.0, 0.0), elevation_samples=1)
    pc = render_lidar(model, RigidTransform(), wall)
    assert len(pc) == 1
    np.testing.assert_allclose(pc.points[0], [2.0, 0.0, 0.0], atol=1e-12)
    assert pc.provenance[0] == LIDAR


def test_lidar_empty_scene():
    pc = render_lidar(LidarModel(), RigidTransform(), EMPTY)
    assert len(pc) == 0 and pc.points.shape == (0, 3)


def test_lidar_inside_cylinder_matches_analytic_range():
    # fine tessellation keeps the flat-facet error under 1e-6 at every elevation used
    cyl = cylinder_mesh(3.0, 20.0, segments=8192)
    scene = Scene([(build_bvh(cyl), RigidTransform(translation=[0, 0, -10]))])
    model = LidarModel(RigidTransform(), azimuth_samples=90, elevation_samples=8, max_range=20.0)
    pc = render_lidar(model, RigidTransform(), scene)
    assert len(pc) == 90 * 8
    el = np.arcsin(model.directions()[:, 2])
    np.testing.assert_allclose(np.linalg.norm(pc.points, axis=1), 3.0 / np.cos(el), atol=1e-6)
    np.testing.assert_allclose(np.hypot(pc.points[:, 0], pc.points[:, 1]), 3.0, atol=1e-6)


def test_lidar_model_validation():
    with pytest.raises(ValueError):
        LidarModel(azimuth_samples=0)
    with pytest.raises(ValueError):
        LidarModel(elevation_range=(-95.0, 10.0))


def test_lidar_max_range_drops_far_hits():
    model = LidarModel(RigidTransform(translation=[0, 0, 1.0]), azimuth_samples=8, elevation_range=(-60, -30),
                       elevation_samples=4, max_range=1.5)
    pc = render_lidar(model, RigidTransform(), ground())
    assert (np.linalg.norm(pc.points, axis=1) <= 1.5).all()
    assert 0 < len(pc) < 32


# -- depth camera ------------------------------------------------------------------

def test_depth_of_fronto_parallel_plane():
    scene = Scene([(build_bvh(plane_mesh(50.0, z=2.0)), RigidTransform())])
    intr = CameraIntrinsics.from_fov(32, 24, 87.0)
    depth = render_depth(intr, (32, 24), RigidTransform(), scene)
    assert depth.shape == (24, 32)
    np.testing.assert_allclose(depth, 2.0, atol=1e-12)


def test_depth_empty_scene_is_zero():
    intr = CameraIntrinsics.from_fov(16, 12, 87.0)
    assert (render_depth(intr, (16, 12), RigidTransform(), EMPTY) == 0).all()


def test_depth_of_tilted_plane_matches_closed_form():
    n = np.array([0.3, -0.2, 1.0])
    n /= np.linalg.norm(n)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, n)
    ang = math.acos(n @ z)
    k = axis / np.linalg.norm(axis)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    rot = np.eye(3) + math.sin(ang) * kx + (1 - math.cos(ang)) * kx @ kx
    p0 = np.array([0.0, 0.0, 3.0])
    scene = Scene([(build_bvh(plane_mesh(60.0)), RigidTransform(rot, p0))])
    intr = CameraIntrinsics.from_fov(40, 30, 80.0)
    depth = render_depth(intr, (40, 30), RigidTransform(), scene)
    rays = pixel_rays(intr, 40, 30)
    expected = (n @ p0) / (rays @ n)
    np.testing.assert_allclose(depth.reshape(-1), expected, atol=1e-6)


def test_depth_respects_max_range():
    scene = Scene([(build_bvh(plane_mesh(50.0, z=2.0)), RigidTransform())])
    intr = CameraIntrinsics.from_fov(8, 6, 60.0)
    assert (render_depth(intr, (8, 6), RigidTransform(), scene, max_range=1.5) == 0).all()


def test_backproject_examples():
    depth = np.zeros((100, 200))
    depth[50, 50] = 2.0
    depth[50, 150] = 2.0
    pc = backproject(depth, K100)
    assert len(pc) == 2
    np.testing.assert_allclose(pc.points, [[0.0, 0.0, 2.0], [2.0, 0.0, 2.0]], atol=1e-12)
    assert (pc.provenance == DEPTH).all()


def test_backproject_skips_invalid_pixels():
    assert len(backproject(np.zeros((10, 10)), K100)) == 0


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0, 0)


def test_render_backproject_round_trip():
    scene = Scene([(build_bvh(plane_mesh(30.0)), RigidTransform()),
                   (build_bvh(box_mesh((1, 1, 1))), RigidTransform(translation=[2.5, 0.3, 0.5]))])
    pose = RigidTransform.from_euler(0, 0, 0.2, [0.0, 0.0, 0.0])
    mount = camera_mount()
    cam = pose.compose(mount)
    intr = CameraIntrinsics.from_fov(48, 36, 87.0)
    depth = render_depth(intr, (48, 36), pose, scene, mount)
    pts = cam.apply(backproject(depth, intr).points)
    rays = pixel_rays(intr, 48, 36)
    dirs = cam.apply_dirs(rays / np.linalg.norm(rays, axis=1, keepdims=True))
    hits = raycast_many(scene, np.broadcast_to(cam.translation, dirs.shape), dirs)
    assert hits.hit.sum() == len(pts)
    np.testing.assert_allclose(pts, hits.points[hits.hit], atol=1e-6)


# -- cloud processing --------------------------------------------------------------

def test_voxel_downsample_examples():
    pc = voxel_downsample(PointCloud([[0.01, 0, 0], [0.02, 0, 0]]), 0.1)
    np.testing.assert_allclose(pc.points, [[0.015, 0, 0]], atol=1e-15)
    apart = PointCloud([[0.05, 0, 0], [0.55, 0, 0], [0.05, 1.05, 0]])
    assert len(voxel_downsample(apart, 0.1)) == 3
    assert len(voxel_downsample(PointCloud.empty(), 0.1)) == 0
    with pytest.raises(ValueError):
        voxel_downsample(apart, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 1.0))
def test_voxel_downsample_idempotent(seed, voxel):
    pts = np.random.default_rng(seed).uniform(-2, 2, size=(200, 3))
    once = voxel_downsample(PointCloud(pts), voxel)
    twice = voxel_downsample(once, voxel)
    np.testing.assert_allclose(twice.points, once.points, atol=1e-12)


def test_fuse_identity_concatenates_lidar_first():
    a = PointCloud([[1.0, 0, 0]], "sensor", [LIDAR])
    b = PointCloud([[0, 2.0, 0], [0, 0, 3.0]], "sensor", [DEPTH, DEPTH])
    out = fuse(a, b, RigidTransform(), RigidTransform())
    np.testing.assert_array_equal(out.points, [[1, 0, 0], [0, 2, 0], [0, 0, 3]])
    np.testing.assert_array_equal(out.provenance, [LIDAR, DEPTH, DEPTH])
    assert out.frame == "world"


def test_fuse_with_one_empty_input():
    b = PointCloud([[0, 2.0, 0]], "sensor", [DEPTH])
    out = fuse(PointCloud.empty(), b, RigidTransform(), RigidTransform())
    np.testing.assert_array_equal(out.points, b.points)


def test_fuse_rejects_world_frame_input():
    with pytest.raises(FrameMismatchError):
        fuse(PointCloud([[0, 0, 0]], "world"), PointCloud.empty(), RigidTransform(), RigidTransform())


def test_fused_points_of_shared_surface_lie_on_it():
    suite = SensorSuite()
    pose = RigidTransform.from_euler(0, 0, 0.7, [1.0, -2.0, 0.0])
    pc = suite.observe(pose, ground(), frame="world")
    for src in (LIDAR, DEPTH):
        sel = pc.provenance == src
        assert sel.sum() > 0
    # lidar points are voxel centroids on the plane; depth points are raw hits
    np.testing.assert_allclose(pc.points[:, 2], 0.0, atol=1e-6)


def test_camera_sees_ground_the_lidar_misses():
    suite = SensorSuite()
    pc = suite.observe(RigidTransform(), ground(), frame="robot")
    ahead = (pc.points[:, 0] > 0) & (pc.points[:, 0] < 1.0) & (np.abs(pc.points[:, 1]) < 0.5)
    cells = lambda m: {tuple(c) for c in np.floor(pc.points[m][:, :2] / 0.1).astype(int)}
    depth_only = cells(ahead & (pc.provenance == DEPTH)) - cells(ahead & (pc.provenance == LIDAR))
    assert len(depth_only) > 0


def test_inverted_mount_points_band_downward():
    m = inverted_mount()
    up = m.apply_dirs(np.array([[math.cos(0.5), 0, math.sin(0.5)]]))[0]
    assert up[2] < 0


def test_observation_is_deterministic():
    suite = SensorSuite()
    pose = RigidTransform.from_euler(0, 0, 0.3, [0.5, 0.5, 0.0])
    a, b = suite.observe(pose, ground()), suite.observe(pose, ground())
    np.testing.assert_array_equal(a.points, b.points)


# -- dumps -------------------------------------------------------------------------

def test_xyz_round_trip(tmp_path):
    pc = PointCloud([[1.0, 2.0, 3.0], [-0.5, 0.25, 0.0]], "world", [LIDAR, DEPTH])
    write_xyz(tmp_path / "c.xyz", pc)
    back = read_xyz(tmp_path / "c.xyz")
    np.testing.assert_allclose(back.points, pc.points, atol=1e-6)
    np.testing.assert_array_equal(back.provenance, pc.provenance)


def test_pgm16_depth_in_millimetres(tmp_path):
    depth = np.array([[0.0, 1.2345], [65.535, 2.0]])
    write_pgm16(tmp_path / "d.pgm", depth)
    np.testing.assert_array_equal(read_pgm(tmp_path / "d.pgm"), [[0, 1234], [65535, 2000]])
