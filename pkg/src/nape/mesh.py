"""Fixed-topology triangle meshes: OBJ I/O, topology identity, graph Laplacian.

All geometry is in millimeters. Meshes carry one UV per vertex and are treated
as immutable values after construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh with per-vertex UVs.

    vertices: (N, 3) float64, millimeters.
    faces: (F, 3) int64 vertex indices.
    uv: (N, 2) float64 in [0, 1).
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    topology_id: str = field(init=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        t = np.ascontiguousarray(self.uv, dtype=np.float64)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "uv", t)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (N, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {f.shape}")
        if t.shape != (v.shape[0], 2):
            raise MeshError(f"uv must be (N, 2) matching vertices, got {t.shape}")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise MeshError(
                f"face index out of range: max index {f.max()} with {v.shape[0]} vertices"
            )
        if f.size:
            degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degenerate.any():
                raise MeshError(f"degenerate faces at rows {np.nonzero(degenerate)[0][:8].tolist()}")
        if t.size and (t.min() < 0.0 or t.max() >= 1.0):
            raise MeshError("uv coordinates must lie in [0, 1)")
        object.__setattr__(self, "topology_id", _topology_hash(f, t))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices=vertices, faces=self.faces, uv=self.uv)


def _topology_hash(faces: np.ndarray, uv: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(faces, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(uv, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def load_obj(path: str | Path) -> Mesh:
    """Parse a triangles-only OBJ with v/vt/f records and a 1:1 v/vt mapping.

    Face records may be ``f a b c`` or ``f a/at b/bt c/ct``; indices are
    1-based. Raises MeshError with the offending line number on parse errors.
    """
    verts: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[list[int]] = []
    path = Path(path)
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "vt":
                    uvs.append([float(x) for x in parts[1:3]])
                elif tag == "f":
                    if len(parts) != 4:
                        raise MeshError(f"{path}:{lineno}: only triangles supported")
                    idx = []
                    for p in parts[1:]:
                        fields = p.split("/")
                        vi = int(fields[0])
                        if len(fields) > 1 and fields[1] and int(fields[1]) != vi:
                            raise MeshError(
                                f"{path}:{lineno}: vt index differs from v index; "
                                "per-vertex 1:1 uv mapping required"
                            )
                        idx.append(vi - 1)
                    faces.append(idx)
            except MeshError:
                raise
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: {exc}") from exc
    if not verts:
        raise MeshError(f"{path}: no vertices")
    if len(uvs) != len(verts):
        raise MeshError(f"{path}: {len(uvs)} vt records for {len(verts)} vertices; need 1:1")
    v = np.asarray(verts, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and (f.min() < 0 or f.max() >= len(verts)):
        raise MeshError(f"{path}: face index out of range ({f.max() + 1} > {len(verts)})")
    return Mesh(vertices=v, faces=f, uv=np.asarray(uvs, dtype=np.float64))


def save_obj(mesh: Mesh, path: str | Path) -> None:
    """Write an OBJ that load_obj parses back bitwise (coordinates use %.17g)."""
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {x:.17g} {y:.17g} {z:.17g}")
    for u, v in mesh.uv:
        lines.append(f"vt {u:.17g} {v:.17g}")
    for a, b, c in mesh.faces + 1:
        lines.append(f"f {a}/{a} {b}/{b} {c}/{c}")
    Path(path).write_text("\n".join(lines) + "\n")


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges (E, 2) with i < j."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def graph_laplacian(mesh: Mesh) -> sp.csr_matrix:
    """Uniform (degree-normalized) graph Laplacian L = I - D^-1 A.

    Rows sum to zero; the sparsity pattern is symmetric (mesh edges).
    """
    n = mesh.n_vertices
    edges = mesh_edges(mesh.faces)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    inv_deg = sp.diags(1.0 / deg)
    lap = sp.identity(n, format="csr") - inv_deg @ adj
    return lap.tocsr()


def laplacian_energy(lap: sp.spmatrix, field: np.ndarray) -> float:
    """||L field||^2 summed over coordinates; zero iff field is in the null space."""
    f = np.asarray(field, dtype=np.float64)
    if f.shape[0] != lap.shape[0]:
        raise MeshError(f"field has {f.shape[0]} rows, Laplacian expects {lap.shape[0]}")
    smoothed = lap @ f
    return float(np.sum(smoothed * smoothed))


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted outward vertex normals, unit length."""
    v = np.asarray(vertices, dtype=np.float64)
    fn = np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]])
    normals = np.zeros_like(v)
    np.add.at(normals, faces[:, 0], fn)
    np.add.at(normals, faces[:, 1], fn)
    np.add.at(normals, faces[:, 2], fn)
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return normals / norms


def vertex_normals_torch(verts: "torch.Tensor", faces: "torch.Tensor") -> "torch.Tensor":
    """Differentiable area-weighted vertex normals; verts (..., N, 3)."""
    import torch

    fv0 = verts[..., faces[:, 0], :]
    fn = torch.cross(verts[..., faces[:, 1], :] - fv0, verts[..., faces[:, 2], :] - fv0, dim=-1)
    normals = torch.zeros_like(verts)
    dim = verts.dim() - 2
    for corner in range(3):
        normals = normals.index_add(dim, faces[:, corner], fn)
    return normals / torch.linalg.norm(normals, dim=-1, keepdim=True).clamp_min(1e-300)
