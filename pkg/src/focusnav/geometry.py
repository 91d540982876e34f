"""Triangle meshes, rigid transforms, per-mesh BVHs and frame-aware raycasting.

Each mesh keeps its BVH in its own local frame. A scene is a list of
``(Bvh, RigidTransform)`` instances; rays are moved into each instance frame
(origin by the inverse transform, direction by the inverse rotation),
intersected there, and hits are mapped back to the world.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np

LEAF_SIZE = 4
DET_EPS = 1e-9
AREA_EPS = 1e-12


class DegenerateMeshError(ValueError):
    def __init__(self, message: str, triangles: Sequence[int] = ()):
        self.triangles = list(triangles)
        super().__init__(message)


# -- transforms ----------------------------------------------------------------

def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_euler(cls, roll=0.0, pitch=0.0, yaw=0.0, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rot_z(yaw) @ rot_y(pitch) @ rot_x(roll), translation)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 5.0) -> "RigidTransform":
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        r = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
        return cls(r, rng.uniform(-scale, scale, size=3))

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_dirs(self, dirs: np.ndarray) -> np.ndarray:
        return np.asarray(dirs, dtype=np.float64) @ self.rotation.T

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(np.allclose(r @ r.T, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) <= tol)


# -- meshes --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    mesh_id: int = 0

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    def __len__(self):
        return len(self.triangles)

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.vertices[self.triangles[:, 0]], self.vertices[self.triangles[:, 1]], self.vertices[self.triangles[:, 2]]

    def areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def validate(self):
        if len(self.triangles) == 0 or len(self.vertices) == 0:
            raise DegenerateMeshError(f"mesh {self.mesh_id} is empty")
        bad_idx = np.nonzero(((self.triangles < 0) | (self.triangles >= len(self.vertices))).any(axis=1))[0]
        if len(bad_idx):
            raise DegenerateMeshError(f"mesh {self.mesh_id}: vertex index out of range in triangles {bad_idx[:10].tolist()}",
                                      bad_idx.tolist())
        bad = np.nonzero(self.areas() <= AREA_EPS)[0]
        if len(bad):
            raise DegenerateMeshError(f"mesh {self.mesh_id}: degenerate triangles {bad[:10].tolist()}", bad.tolist())

    def with_id(self, mesh_id: int) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles, mesh_id)


def merge_meshes(meshes: Iterable[TriangleMesh], mesh_id: int = 0) -> TriangleMesh:
    verts, tris, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + off)
        off += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris), mesh_id)


def read_obj(path, mesh_id: int = 0) -> TriangleMesh:
    """Read ``v``/``f`` lines of a Wavefront file; polygons are fan-triangulated."""
    verts, tris = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                tris.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3), mesh_id)


def write_obj(path, mesh: TriangleMesh):
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def box_mesh(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0), mesh_id: int = 0) -> TriangleMesh:
    sx, sy, sz = np.asarray(size) / 2.0
    c = np.asarray(center, dtype=np.float64)
    v = np.array([[x, y, z] for z in (-sz, sz) for y in (-sy, sy) for x in (-sx, sx)]) + c
    f = [[0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6], [0, 1, 4], [1, 5, 4],
         [2, 6, 3], [3, 6, 7], [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5]]
    return TriangleMesh(v, np.array(f), mesh_id)


def cylinder_mesh(radius: float, height: float, segments: int = 24, mesh_id: int = 0) -> TriangleMesh:
    """Closed vertical prism from z=0 to z=height, centred on the z axis."""
    a = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(a), radius * np.sin(a)], axis=1)
    bottom = np.column_stack([ring, np.zeros(segments)])
    top = np.column_stack([ring, np.full(segments, height)])
    v = np.vstack([bottom, top, [[0, 0, 0], [0, 0, height]]])
    cb, ct = 2 * segments, 2 * segments + 1
    f = []
    for i in range(segments):
        j = (i + 1) % segments
        f += [[i, j, segments + i], [j, segments + j, segments + i], [cb, j, i], [ct, segments + i, segments + j]]
    return TriangleMesh(v, np.array(f), mesh_id)


def plane_mesh(size: float, z: float = 0.0, mesh_id: int = 0) -> TriangleMesh:
    h = size / 2.0
    v = np.array([[-h, -h, z], [h, -h, z], [h, h, z], [-h, h, z]])
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]), mesh_id)


def random_mesh(n: int, rng: np.random.Generator, extent: float = 10.0, tri_size: float = 0.5,
                mesh_id: int = 0) -> TriangleMesh:
    """Triangle soup: n small random triangles scattered in a cube."""
    centers = rng.uniform(-extent / 2, extent / 2, size=(n, 3))
    offs = rng.normal(scale=tri_size, size=(n, 3, 3))
    v = (centers[:, None, :] + offs).reshape(-1, 3)
    return TriangleMesh(v, np.arange(3 * n).reshape(n, 3), mesh_id)


def heightfield_mesh(heights: np.ndarray, resolution: float, origin=(0.0, 0.0), mesh_id: int = 0,
                     merge: bool = True) -> TriangleMesh:
    """Mesh a piecewise-constant heightfield: flat cell tops plus vertical walls.

    ``heights[i, j]`` is the surface of the cell spanning
    x ∈ origin_x + [i, i+1)·res, y ∈ origin_y + [j, j+1)·res. With ``merge``
    equal-height cells are merged greedily into rectangles.
    """
    h = np.asarray(heights, dtype=np.float64)
    nx, ny = h.shape
    ox, oy = origin
    verts: list[list[float]] = []
    tris: list[list[int]] = []

    def quad(p0, p1, p2, p3):
        b = len(verts)
        verts.extend([p0, p1, p2, p3])
        tris.extend([[b, b + 1, b + 2], [b, b + 2, b + 3]])

    used = np.zeros_like(h, dtype=bool)
    for i in range(nx):
        for j in range(ny):
            if used[i, j]:
                continue
            z = h[i, j]
            j1 = j + 1
            if merge:
                while j1 < ny and not used[i, j1] and h[i, j1] == z:
                    j1 += 1
            i1 = i + 1
            if merge:
                while i1 < nx and not used[i1, j:j1].any() and np.all(h[i1, j:j1] == z):
                    i1 += 1
            used[i:i1, j:j1] = True
            x0, x1 = ox + i * resolution, ox + i1 * resolution
            y0, y1 = oy + j * resolution, oy + j1 * resolution
            quad([x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z])

    # walls between i-neighbours (constant x), runs merged along y
    for i in range(nx - 1):
        j = 0
        while j < ny:
            a, b = h[i, j], h[i + 1, j]
            if a == b:
                j += 1
                continue
            j1 = j + 1
            while merge and j1 < ny and h[i, j1] == a and h[i + 1, j1] == b:
                j1 += 1
            x = ox + (i + 1) * resolution
            lo, hi = min(a, b), max(a, b)
            quad([x, oy + j * resolution, lo], [x, oy + j1 * resolution, lo],
                 [x, oy + j1 * resolution, hi], [x, oy + j * resolution, hi])
            j = j1
    for j in range(ny - 1):
        i = 0
        while i < nx:
            a, b = h[i, j], h[i, j + 1]
            if a == b:
                i += 1
                continue
            i1 = i + 1
            while merge and i1 < nx and h[i1, j] == a and h[i1, j + 1] == b:
                i1 += 1
            y = oy + (j + 1) * resolution
            lo, hi = min(a, b), max(a, b)
            quad([ox + i * resolution, y, lo], [ox + i1 * resolution, y, lo],
                 [ox + i1 * resolution, y, hi], [ox + i * resolution, y, hi])
            i = i1
    return TriangleMesh(np.array(verts), np.array(tris, dtype=np.int64), mesh_id)


# -- BVH -----------------------------------------------------------------------

@numba.njit(cache=True)
def _build_bvh_kernel(tmin, tmax, cent, leaf_size):
    n = tmin.shape[0]
    cap = 2 * n + 1
    node_min = np.empty((cap, 3))
    node_max = np.empty((cap, 3))
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    order = np.arange(n)
    stack_node = np.empty(cap, dtype=np.int64)
    sp = 0
    n_nodes = 1
    start[0] = 0
    count[0] = n
    stack_node[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        nd = stack_node[sp]
        s = start[nd]
        c = count[nd]
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for k in range(s, s + c):
            t = order[k]
            for a in range(3):
                lo[a] = min(lo[a], tmin[t, a])
                hi[a] = max(hi[a], tmax[t, a])
                clo[a] = min(clo[a], cent[t, a])
                chi[a] = max(chi[a], cent[t, a])
        node_min[nd] = lo
        node_max[nd] = hi
        if c <= leaf_size:
            continue
        ext = chi - clo
        axis = 0
        if ext[1] > ext[axis]:
            axis = 1
        if ext[2] > ext[axis]:
            axis = 2
        seg = order[s:s + c].copy()
        keys = cent[seg, axis]
        # stable sort keeps the build deterministic for equal centroids
        perm = np.argsort(keys, kind="mergesort")
        order[s:s + c] = seg[perm]
        half = c // 2
        l_id = n_nodes
        r_id = n_nodes + 1
        n_nodes += 2
        left[nd] = l_id
        right[nd] = r_id
        start[l_id] = s
        count[l_id] = half
        start[r_id] = s + half
        count[r_id] = c - half
        stack_node[sp] = r_id
        sp += 1
        stack_node[sp] = l_id
        sp += 1
    return (node_min[:n_nodes].copy(), node_max[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), start[:n_nodes].copy(), count[:n_nodes].copy(), order)


@dataclass(frozen=True, eq=False)
class Bvh:
    """Flattened binary BVH. Leaves reference ``order[start:start+count]``."""

    mesh: TriangleMesh
    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    v0: np.ndarray  # per-triangle corner / edges in BVH order
    e1: np.ndarray
    e2: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.left)

    @property
    def mesh_id(self) -> int:
        return self.mesh.mesh_id

    def leaves(self) -> np.ndarray:
        return np.nonzero(self.left < 0)[0]


def build_bvh(mesh: TriangleMesh, leaf_size: int = LEAF_SIZE) -> Bvh:
    """Median split on the longest centroid axis, at most ``leaf_size`` triangles per leaf."""
    mesh.validate()
    a, b, c = mesh.corners()
    tmin = np.minimum(np.minimum(a, b), c)
    tmax = np.maximum(np.maximum(a, b), c)
    cent = (a + b + c) / 3.0
    arrays = list(_build_bvh_kernel(tmin, tmax, cent, leaf_size))
    # pad boxes so rounding in the slab test never prunes a hit on a box face
    arrays[0] -= 1e-9 * (1.0 + np.abs(arrays[0]))
    arrays[1] += 1e-9 * (1.0 + np.abs(arrays[1]))
    order = arrays[-1]
    v0 = np.ascontiguousarray(a[order])
    e1 = np.ascontiguousarray(b[order] - a[order])
    e2 = np.ascontiguousarray(c[order] - a[order])
    for arr in (*arrays, v0, e1, e2):
        arr.setflags(write=False)
    return Bvh(mesh, *arrays, v0, e1, e2)


# -- rays ----------------------------------------------------------------------

@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    max_range: float = np.inf

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, got |d| = {np.linalg.norm(d)}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", d)

    @classmethod
    def toward(cls, origin, direction, max_range: float = np.inf) -> "Ray":
        d = np.asarray(direction, dtype=np.float64)
        return cls(origin, d / np.linalg.norm(d), max_range)


@dataclass(frozen=True)
class HitRecord:
    hit: bool
    t: float = np.inf
    point: np.ndarray | None = None
    mesh_id: int = -1
    triangle: int = -1


@dataclass
class Scene:
    """Instances of BVHs placed by rigid transforms, packed for the kernels."""

    entries: list[tuple[Bvh, RigidTransform]]

    def __post_init__(self):
        self.entries = list(self.entries)
        self._pack_geometry()
        self._pack_instances()

    def _pack_geometry(self):
        uniq: dict[int, int] = {}
        bvhs: list[Bvh] = []
        for bvh, _ in self.entries:
            if id(bvh) not in uniq:
                uniq[id(bvh)] = len(bvhs)
                bvhs.append(bvh)
        self._bvh_slot = [uniq[id(b)] for b, _ in self.entries]
        node_off = np.cumsum([0] + [b.num_nodes for b in bvhs])
        tri_off = np.cumsum([0] + [len(b.order) for b in bvhs])
        self._node_off = node_off[:-1].astype(np.int64)
        self._tri_off = tri_off[:-1].astype(np.int64)
        if bvhs:
            cat = lambda attr: np.ascontiguousarray(np.concatenate([getattr(b, attr) for b in bvhs]))
            self.node_min, self.node_max = cat("node_min"), cat("node_max")
            self.left, self.right, self.start, self.count = cat("left"), cat("right"), cat("start"), cat("count")
            self.order, self.v0, self.e1, self.e2 = cat("order"), cat("v0"), cat("e1"), cat("e2")
        else:
            z3 = np.zeros((0, 3))
            zi = np.zeros(0, dtype=np.int64)
            self.node_min = self.node_max = z3
            self.left = self.right = self.start = self.count = self.order = zi
            self.v0 = self.e1 = self.e2 = z3

    def _pack_instances(self):
        n = len(self.entries)
        self.inst_rot = np.zeros((n, 3, 3))
        self.inst_trans = np.zeros((n, 3))
        self.inst_box = np.zeros((n, 2, 3))
        self.inst_node = np.zeros(n, dtype=np.int64)
        self.inst_tri = np.zeros(n, dtype=np.int64)
        self.inst_mesh_id = np.zeros(n, dtype=np.int64)
        for k, (bvh, tf) in enumerate(self.entries):
            self._set_instance(k, bvh, tf)

    def _set_instance(self, k: int, bvh: Bvh, tf: RigidTransform):
        slot = self._bvh_slot[k]
        self.inst_rot[k] = tf.rotation
        self.inst_trans[k] = tf.translation
        lo, hi = bvh.node_min[0], bvh.node_max[0]
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        wc = tf.apply(corners)
        pad = 1e-9 * (1.0 + np.abs(wc).max())
        self.inst_box[k, 0] = wc.min(axis=0) - pad
        self.inst_box[k, 1] = wc.max(axis=0) + pad
        self.inst_node[k] = self._node_off[slot]
        self.inst_tri[k] = self._tri_off[slot]
        self.inst_mesh_id[k] = bvh.mesh_id

    def set_transform(self, k: int, tf: RigidTransform):
        bvh, _ = self.entries[k]
        self.entries[k] = (bvh, tf)
        self._set_instance(k, bvh, tf)

    def __len__(self):
        return len(self.entries)


def as_scene(scene) -> Scene:
    return scene if isinstance(scene, Scene) else Scene(list(scene))


@numba.njit(cache=True, inline="always")
def _slab(o, inv, lo, hi, t_hi):
    t0 = 0.0
    t1 = t_hi
    for a in range(3):
        ta = (lo[a] - o[a]) * inv[a]
        tb = (hi[a] - o[a]) * inv[a]
        if ta > tb:
            ta, tb = tb, ta
        # NaN (0 * inf on a box face) must not prune: treat as unbounded
        if ta == ta and ta > t0:
            t0 = ta
        if tb == tb and tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@numba.njit(cache=True)
def _trace_kernel(origins, dirs, max_range, inst_rot, inst_trans, inst_box, inst_node, inst_tri,
                  inst_mesh_id, node_min, node_max, left, right, start, count, order, v0, e1, e2,
                  out_t, out_inst, out_tri, counters):
    n_rays = origins.shape[0]
    n_inst = inst_rot.shape[0]
    stack = np.empty(256, dtype=np.int64)
    o = np.empty(3)
    d = np.empty(3)
    inv = np.empty(3)
    wi = np.empty(3)
    for r in range(n_rays):
        best_t = max_range[r]
        best_inst = -1
        best_tri = -1
        best_mid = 0
        n_tests = 0
        for a in range(3):
            wi[a] = 1.0 / dirs[r, a] if dirs[r, a] != 0.0 else np.inf
        for k in range(n_inst):
            if not _slab(origins[r], wi, inst_box[k, 0], inst_box[k, 1], best_t):
                continue
            # local frame: o = R^T (p - t), d = R^T d
            for a in range(3):
                o[a] = 0.0
                d[a] = 0.0
                for b in range(3):
                    o[a] += inst_rot[k, b, a] * (origins[r, b] - inst_trans[k, b])
                    d[a] += inst_rot[k, b, a] * dirs[r, b]
            for a in range(3):
                inv[a] = 1.0 / d[a] if d[a] != 0.0 else np.inf
            nb = inst_node[k]
            tb = inst_tri[k]
            mid = inst_mesh_id[k]
            sp = 0
            stack[sp] = 0
            sp += 1
            while sp > 0:
                sp -= 1
                nd = nb + stack[sp]
                if not _slab(o, inv, node_min[nd], node_max[nd], best_t):
                    continue
                if left[nd] >= 0:
                    stack[sp] = right[nd]
                    sp += 1
                    stack[sp] = left[nd]
                    sp += 1
                    continue
                for q in range(start[nd], start[nd] + count[nd]):
                    j = tb + q
                    n_tests += 1
                    px = d[1] * e2[j, 2] - d[2] * e2[j, 1]
                    py = d[2] * e2[j, 0] - d[0] * e2[j, 2]
                    pz = d[0] * e2[j, 1] - d[1] * e2[j, 0]
                    det = e1[j, 0] * px + e1[j, 1] * py + e1[j, 2] * pz
                    if abs(det) < 1e-9:
                        continue
                    idet = 1.0 / det
                    sx = o[0] - v0[j, 0]
                    sy = o[1] - v0[j, 1]
                    sz = o[2] - v0[j, 2]
                    u = (sx * px + sy * py + sz * pz) * idet
                    if u < 0.0 or u > 1.0:
                        continue
                    qx = sy * e1[j, 2] - sz * e1[j, 1]
                    qy = sz * e1[j, 0] - sx * e1[j, 2]
                    qz = sx * e1[j, 1] - sy * e1[j, 0]
                    v = (d[0] * qx + d[1] * qy + d[2] * qz) * idet
                    if v < 0.0 or u + v > 1.0:
                        continue
                    t = (e2[j, 0] * qx + e2[j, 1] * qy + e2[j, 2] * qz) * idet
                    if t <= 0.0 or t > best_t:
                        continue
                    tri = order[tb + q]
                    if t == best_t and best_inst >= 0:
                        if mid > best_mid or (mid == best_mid and tri >= best_tri):
                            continue
                    best_t = t
                    best_inst = k
                    best_tri = tri
                    best_mid = mid
        out_t[r] = best_t if best_inst >= 0 else np.inf
        out_inst[r] = best_inst
        out_tri[r] = best_tri
        counters[r] = n_tests


@dataclass
class RayBatch:
    t: np.ndarray
    hit: np.ndarray
    points: np.ndarray
    instance: np.ndarray
    mesh_id: np.ndarray
    triangle: np.ndarray
    triangle_tests: int


def raycast_many(scene, origins: np.ndarray, dirs: np.ndarray, max_range=np.inf) -> RayBatch:
    """Nearest hits for many world-frame rays (dirs must be unit length)."""
    sc = as_scene(scene)
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    rng_arr = np.ascontiguousarray(np.broadcast_to(np.asarray(max_range, dtype=np.float64), (n,)))
    out_t = np.full(n, np.inf)
    out_inst = np.full(n, -1, dtype=np.int64)
    out_tri = np.full(n, -1, dtype=np.int64)
    counters = np.zeros(n, dtype=np.int64)
    if len(sc) and n:
        _trace_kernel(origins, dirs, rng_arr, sc.inst_rot, sc.inst_trans, sc.inst_box, sc.inst_node, sc.inst_tri,
                      sc.inst_mesh_id, sc.node_min, sc.node_max, sc.left, sc.right, sc.start, sc.count,
                      sc.order, sc.v0, sc.e1, sc.e2, out_t, out_inst, out_tri, counters)
    hit = out_inst >= 0
    pts = np.full((n, 3), np.nan)
    pts[hit] = origins[hit] + out_t[hit, None] * dirs[hit]
    mids = np.where(hit, sc.inst_mesh_id[np.maximum(out_inst, 0)] if len(sc) else -1, -1)
    return RayBatch(out_t, hit, pts, out_inst, mids, out_tri, int(counters.sum()))


def raycast(scene, ray: Ray) -> HitRecord:
    """Nearest hit over all scene entries; a miss is ``HitRecord(hit=False)``."""
    sc = as_scene(scene)
    res = raycast_many(sc, ray.origin[None], ray.direction[None], ray.max_range)
    if not res.hit[0]:
        return HitRecord(False)
    k = int(res.instance[0])
    # map the local hit back through the instance transform (T · local point)
    bvh, tf = sc.entries[k]
    local_o = tf.inverse().apply(ray.origin)
    local_d = tf.rotation.T @ ray.direction
    point = tf.apply(local_o + res.t[0] * local_d)
    return HitRecord(True, float(res.t[0]), point, int(res.mesh_id[0]), int(res.triangle[0]))


def _mt_all(o, d, v0, e1, e2):
    """Möller–Trumbore of one ray against all triangles (vectorised)."""
    px = d[1] * e2[:, 2] - d[2] * e2[:, 1]
    py = d[2] * e2[:, 0] - d[0] * e2[:, 2]
    pz = d[0] * e2[:, 1] - d[1] * e2[:, 0]
    det = e1[:, 0] * px + e1[:, 1] * py + e1[:, 2] * pz
    ok = np.abs(det) >= DET_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        idet = 1.0 / det
        sx, sy, sz = o[0] - v0[:, 0], o[1] - v0[:, 1], o[2] - v0[:, 2]
        u = (sx * px + sy * py + sz * pz) * idet
        qx = sy * e1[:, 2] - sz * e1[:, 1]
        qy = sz * e1[:, 0] - sx * e1[:, 2]
        qz = sx * e1[:, 1] - sy * e1[:, 0]
        v = (d[0] * qx + d[1] * qy + d[2] * qz) * idet
        t = (e2[:, 0] * qx + e2[:, 1] * qy + e2[:, 2] * qz) * idet
    ok &= (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > 0)
    return np.where(ok, t, np.inf)


def raycast_brute(mesh: TriangleMesh, transform: RigidTransform, ray: Ray) -> HitRecord:
    """Exhaustive oracle for :func:`raycast` on a single (mesh, transform)."""
    return raycast_brute_scene([(mesh, transform)], ray)[0]


def raycast_brute_scene(entries: Sequence[tuple[TriangleMesh, RigidTransform]], ray: Ray) -> tuple[HitRecord, int]:
    """Brute force over every triangle of every entry; returns (hit, triangle tests)."""
    best = (np.inf, 0, 0, -1)  # t, mesh_id, tri, entry
    tests = 0
    for k, (mesh, tf) in enumerate(entries):
        a, b, c = mesh.corners()
        inv = tf.inverse()
        o = inv.apply(ray.origin)
        d = tf.rotation.T @ ray.direction
        t = _mt_all(o, d, a, b - a, c - a)
        tests += len(t)
        t = np.where(t <= ray.max_range, t, np.inf)
        j = int(np.argmin(t))  # argmin returns the lowest index among ties
        cand = (t[j], mesh.mesh_id, j, k)
        if np.isfinite(t[j]) and cand[:3] < best[:3]:
            best = cand
    if best[3] < 0:
        return HitRecord(False), tests
    return HitRecord(True, float(best[0]), ray.origin + best[0] * ray.direction, int(best[1]), int(best[2])), tests


# -- point-to-mesh distance ------------------------------------------------------

@numba.njit(cache=True, inline="always")
def _closest_on_triangle_sq(p, a, ab, ac):
    # Ericson, Real-Time Collision Detection 5.1.5
    apx, apy, apz = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = ab[0] * apx + ab[1] * apy + ab[2] * apz
    d2 = ac[0] * apx + ac[1] * apy + ac[2] * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz
    bpx, bpy, bpz = apx - ab[0], apy - ab[1], apz - ab[2]
    d3 = ab[0] * bpx + ab[1] * bpy + ab[2] * bpz
    d4 = ac[0] * bpx + ac[1] * bpy + ac[2] * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        x, y, z = apx - v * ab[0], apy - v * ab[1], apz - v * ab[2]
        return x * x + y * y + z * z
    cpx, cpy, cpz = apx - ac[0], apy - ac[1], apz - ac[2]
    d5 = ab[0] * cpx + ab[1] * cpy + ab[2] * cpz
    d6 = ac[0] * cpx + ac[1] * cpy + ac[2] * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        x, y, z = apx - w * ac[0], apy - w * ac[1], apz - w * ac[2]
        return x * x + y * y + z * z
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        # closest on edge bc
        bcx, bcy, bcz = ac[0] - ab[0], ac[1] - ab[1], ac[2] - ab[2]
        x, y, z = bpx - w * bcx, bpy - w * bcy, bpz - w * bcz
        return x * x + y * y + z * z
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    x = apx - ab[0] * v - ac[0] * w
    y = apy - ab[1] * v - ac[1] * w
    z = apz - ab[2] * v - ac[2] * w
    return x * x + y * y + z * z


@numba.njit(cache=True)
def _distance_kernel(points, inst_mask, inst_rot, inst_trans, inst_node, inst_tri,
                     node_min, node_max, left, right, start, count, v0, e1, e2, cutoff, out):
    stack = np.empty(256, dtype=np.int64)
    p = np.empty(3)
    for r in range(points.shape[0]):
        best = cutoff * cutoff
        for k in range(inst_rot.shape[0]):
            if not inst_mask[k]:
                continue
            for a in range(3):
                p[a] = 0.0
                for b in range(3):
                    p[a] += inst_rot[k, b, a] * (points[r, b] - inst_trans[k, b])
            nb = inst_node[k]
            tb = inst_tri[k]
            sp = 0
            stack[sp] = 0
            sp += 1
            while sp > 0:
                sp -= 1
                nd = nb + stack[sp]
                dd = 0.0
                for a in range(3):
                    if p[a] < node_min[nd, a]:
                        dd += (node_min[nd, a] - p[a]) ** 2
                    elif p[a] > node_max[nd, a]:
                        dd += (p[a] - node_max[nd, a]) ** 2
                if dd >= best:
                    continue
                if left[nd] >= 0:
                    stack[sp] = right[nd]
                    sp += 1
                    stack[sp] = left[nd]
                    sp += 1
                    continue
                for q in range(start[nd], start[nd] + count[nd]):
                    j = tb + q
                    d2 = _closest_on_triangle_sq(p, v0[j], e1[j], e2[j])
                    if d2 < best:
                        best = d2
        out[r] = np.sqrt(best)


def distance_to_scene(scene, points: np.ndarray, instances: Sequence[int] | None = None,
                      cutoff: float = np.inf) -> np.ndarray:
    """Euclidean distance from each point to the nearest surface (capped at ``cutoff``)."""
    sc = as_scene(scene)
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    mask = np.zeros(len(sc), dtype=np.bool_)
    mask[list(range(len(sc))) if instances is None else list(instances)] = True
    out = np.full(len(pts), cutoff)
    if len(sc) and len(pts):
        _distance_kernel(pts, mask, sc.inst_rot, sc.inst_trans, sc.inst_node, sc.inst_tri, sc.node_min,
                         sc.node_max, sc.left, sc.right, sc.start, sc.count, sc.v0, sc.e1, sc.e2, float(cutoff), out)
    return out
