"""Simulated LiDAR and depth camera, back-projection, voxel downsampling, fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RigidTransform, Scene, raycast_many, rot_x, rot_y

LIDAR, DEPTH = 0, 1
PROVENANCE_NAMES = {LIDAR: "lidar", DEPTH: "depth"}


class FrameMismatchError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3)
    frame: str = "sensor"
    provenance: np.ndarray | None = None  # (n,) uint8, LIDAR or DEPTH

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.provenance is None:
            self.provenance = np.zeros(len(self.points), dtype=np.uint8)
        self.provenance = np.asarray(self.provenance, dtype=np.uint8).reshape(-1)
        if len(self.provenance) != len(self.points):
            raise ValueError("provenance length must match point count")

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls, frame: str = "sensor", source: int = LIDAR) -> "PointCloud":
        return cls(np.zeros((0, 3)), frame, np.full(0, source, dtype=np.uint8))

    def transformed(self, tf: RigidTransform, frame: str) -> "PointCloud":
        return PointCloud(tf.apply(self.points) if len(self) else self.points.copy(), frame, self.provenance.copy())


# -- LiDAR -----------------------------------------------------------------------

def inverted_mount(height: float = 1.2, forward: float = 0.1) -> RigidTransform:
    """Sensor flipped upside down on the head, so its upward band looks at the ground."""
    return RigidTransform(rot_x(math.pi), [forward, 0.0, height])


@dataclass
class LidarModel:
    mount: RigidTransform = field(default_factory=inverted_mount)
    azimuth_samples: int = 360
    elevation_range: tuple[float, float] = (-7.0, 52.0)
    elevation_samples: int = 16
    max_range: float = 10.0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.azimuth_samples < 1 or self.elevation_samples < 1:
            raise ValueError("sample counts must be >= 1")
        lo, hi = self.elevation_range
        if not (-90 < lo <= hi < 90):
            raise ValueError("elevation range must lie within (-90, 90)")

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, azimuth-major order."""
        az = np.arange(self.azimuth_samples) * (2 * np.pi / self.azimuth_samples)
        lo, hi = np.radians(self.elevation_range)
        el = np.array([lo]) if self.elevation_samples == 1 else np.linspace(lo, hi, self.elevation_samples)
        a, e = np.meshgrid(az, el, indexing="ij")
        d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
        return d.reshape(-1, 3)


def render_lidar(model: LidarModel, pose: RigidTransform, scene: Scene,
                 rng: np.random.Generator | None = None) -> PointCloud:
    """Sensor-frame hit points; misses are dropped. ``pose`` maps robot to world."""
    sensor = pose.compose(model.mount)
    dirs_s = model.directions()
    origins = np.broadcast_to(sensor.translation, dirs_s.shape)
    hits = raycast_many(scene, origins, sensor.apply_dirs(dirs_s), model.max_range)
    t = hits.t[hits.hit]
    if model.noise_std > 0 and rng is not None:
        t = t + rng.normal(0.0, model.noise_std, size=t.shape)
    pts = dirs_s[hits.hit] * t[:, None]
    return PointCloud(pts, "sensor", np.full(len(pts), LIDAR, dtype=np.uint8))


# -- depth camera ----------------------------------------------------------------

@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2)


# optical frame (x right, y down, z forward) expressed in the body frame (x fwd, y left, z up)
OPTICAL_TO_BODY = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def camera_mount(height: float = 1.0, forward: float = 0.15, pitch_down_deg: float = 35.0) -> RigidTransform:
    return RigidTransform(rot_y(math.radians(pitch_down_deg)) @ OPTICAL_TO_BODY, [forward, 0.0, height])


@dataclass
class DepthCamera:
    width: int = 64
    height: int = 48
    hfov_deg: float = 87.0
    mount: RigidTransform = field(default_factory=camera_mount)
    max_range: float = 8.0

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, self.hfov_deg)


def pixel_rays(intrinsics: CameraIntrinsics, width: int, height: int) -> np.ndarray:
    """K⁻¹[u, v, 1] per pixel (row-major, u = column, v = row), z component 1."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    uv1 = np.stack([u, v, np.ones_like(u)], axis=-1).reshape(-1, 3)
    return uv1 @ np.linalg.inv(intrinsics.K).T


def render_depth(intrinsics: CameraIntrinsics, size: tuple[int, int], pose: RigidTransform, scene: Scene,
                 mount: RigidTransform | None = None, max_range: float = np.inf) -> np.ndarray:
    """Depth image (height, width): z of the camera-frame hit, 0 where nothing is hit.

    ``size`` is (width, height). ``pose`` maps robot to world; with ``mount``
    omitted, ``pose`` is taken as the camera pose itself.
    """
    width, height = size
    cam = pose if mount is None else pose.compose(mount)
    rays = pixel_rays(intrinsics, width, height)
    norms = np.linalg.norm(rays, axis=1)
    dirs = rays / norms[:, None]
    origins = np.broadcast_to(cam.translation, dirs.shape)
    hits = raycast_many(scene, origins, cam.apply_dirs(dirs), max_range)
    depth = np.zeros(len(dirs))
    depth[hits.hit] = hits.t[hits.hit] / norms[hits.hit]
    return depth.reshape(height, width)


def backproject(depth: np.ndarray, intrinsics: CameraIntrinsics) -> PointCloud:
    """p = d·K⁻¹[u, v, 1] for every pixel with d > 0, in the camera frame."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    rays = pixel_rays(intrinsics, w, h)
    d = depth.reshape(-1)
    valid = d > 0
    return PointCloud(rays[valid] * d[valid, None], "sensor", np.full(int(valid.sum()), DEPTH, dtype=np.uint8))


# -- cloud processing -------------------------------------------------------------

def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One centroid per occupied voxel, sorted by voxel index."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return PointCloud(cloud.points.copy(), cloud.frame, cloud.provenance.copy())
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inv, cloud.points)
    counts = np.bincount(inv, minlength=len(uniq))
    prov = np.zeros(len(uniq), dtype=np.uint8)
    prov[inv[::-1]] = cloud.provenance[::-1]  # provenance of the first point in each voxel
    return PointCloud(sums / counts[:, None], cloud.frame, prov)


def fuse(lidar: PointCloud, depth: PointCloud, lidar_extrinsics: RigidTransform,
         camera_extrinsics: RigidTransform, frame: str = "world") -> PointCloud:
    """Transform both sensor-frame clouds into ``frame`` and concatenate, LiDAR first."""
    if lidar.frame != "sensor" or depth.frame != "sensor":
        raise FrameMismatchError(f"fuse expects sensor-frame clouds, got {lidar.frame!r} and {depth.frame!r}")
    a = lidar.transformed(lidar_extrinsics, frame)
    b = depth.transformed(camera_extrinsics, frame)
    return PointCloud(np.vstack([a.points, b.points]), frame, np.concatenate([a.provenance, b.provenance]))


@dataclass
class SensorSuite:
    lidar: LidarModel = field(default_factory=LidarModel)
    camera: DepthCamera = field(default_factory=DepthCamera)
    lidar_voxel: float = 0.1

    def observe(self, pose: RigidTransform, scene: Scene, frame: str = "robot") -> PointCloud:
        """Fused cloud in the robot frame (``frame='robot'``) or the world frame."""
        lid = voxel_downsample(render_lidar(self.lidar, pose, scene), self.lidar_voxel)
        cam = self.camera
        depth = render_depth(cam.intrinsics, (cam.width, cam.height), pose, scene, cam.mount, cam.max_range)
        pc = backproject(depth, cam.intrinsics)
        if frame == "robot":
            return fuse(lid, pc, self.lidar.mount, cam.mount, "robot")
        return fuse(lid, pc, pose.compose(self.lidar.mount), pose.compose(cam.mount), "world")


# -- dumps ---------------------------------------------------------------------

def write_xyz(path, cloud: PointCloud):
    with open(path, "w") as f:
        for p, s in zip(cloud.points, cloud.provenance):
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {PROVENANCE_NAMES[int(s)]}\n")


def read_xyz(path, frame: str = "world") -> PointCloud:
    pts, prov = [], []
    lookup = {v: k for k, v in PROVENANCE_NAMES.items()}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) < 3:
            continue
        pts.append([float(v) for v in parts[:3]])
        prov.append(lookup.get(parts[3], LIDAR) if len(parts) > 3 else LIDAR)
    return PointCloud(np.array(pts).reshape(-1, 3), frame, np.array(prov, dtype=np.uint8))


def write_pgm16(path, depth_m: np.ndarray):
    """16-bit binary PGM in millimetres (big-endian per the format)."""
    mm = np.clip(np.round(np.asarray(depth_m) * 1000.0), 0, 65535).astype(">u2")
    h, w = mm.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(mm.tobytes())


def read_pgm(path) -> np.ndarray:
    """Binary PGM (8- or 16-bit) as an integer array."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else np.uint8
    return np.frombuffer(data[pos:], dtype=dtype, count=w * h).reshape(h, w).astype(np.int64)
