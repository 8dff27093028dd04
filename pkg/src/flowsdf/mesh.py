"""Triangle meshes from scalar fields, surface sampling and OBJ export."""

from dataclasses import dataclass

import numpy as np
from skimage import measure


class NonFiniteFieldError(ValueError):
    def __init__(self, corner):
        self.corner = tuple(float(c) for c in corner)
        super().__init__(f"field is not finite at grid corner {self.corner}")


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (F, 3) vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def __len__(self):
        return len(self.triangles)

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def triangle_areas(self):
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edges(self):
        """Undirected edges with their multiplicity."""
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def is_watertight(self):
        if self.is_empty:
            return False
        _, counts = self.edges()
        return bool(np.all(counts == 2))

    def euler_characteristic(self):
        used = np.unique(self.triangles)
        E = len(self.edges()[0])
        return int(len(used) - E + len(self.triangles))

    def transformed(self, fn):
        return TriangleMesh(fn(self.vertices), self.triangles.copy())


def grid_points(resolution=64, bounds=(-1.2, 1.2)):
    """Grid axes and the (r^3, 3) corner coordinates in ``ij`` order."""
    lo, hi = bounds
    ax = np.linspace(lo, hi, resolution)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    return ax, np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)


def marching_cubes(field, resolution=64, bounds=(-1.2, 1.2), iso=0.0, chunk=65536):
    """Extract the ``iso`` level set of ``field`` (callable on (n, 3) arrays) on a cubic grid.

    A field that never crosses ``iso`` on the grid yields an empty mesh.
    Triangles are wound with normals pointing toward increasing field values
    (outward for a field that is negative inside).
    """
    if int(resolution) < 2:
        raise ValueError("resolution must be at least 2")
    resolution = int(resolution)
    ax, P = grid_points(resolution, bounds)
    vals = np.concatenate([np.asarray(field(P[i : i + chunk]), dtype=np.float64) for i in range(0, len(P), chunk)])
    bad = ~np.isfinite(vals)
    if bad.any():
        raise NonFiniteFieldError(P[np.argmax(bad)])
    V = vals.reshape(resolution, resolution, resolution)
    if V.min() > iso or V.max() < iso:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    step = ax[1] - ax[0]
    verts, faces, _, _ = measure.marching_cubes(V, level=iso, spacing=(step, step, step), allow_degenerate=False)
    verts = verts + ax[0]
    return TriangleMesh(verts, faces.astype(np.int64))


def sample_mesh_surface(mesh, n, seed=0):
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=int(n), p=areas / total)
    r1 = np.sqrt(rng.random(int(n)))
    r2 = rng.random(int(n))
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def to_obj(mesh):
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    return "\n".join(lines) + "\n"


def save_obj(mesh, path):
    with open(path, "w") as fh:
        fh.write(to_obj(mesh))


def load_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


__all__ = ["TriangleMesh", "marching_cubes", "sample_mesh_surface", "save_obj", "load_obj", "to_obj", "NonFiniteFieldError"]
