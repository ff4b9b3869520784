"""Triangle meshes, icosphere templates, UV parameterization and smoothness terms.

Vertices/uv are torch float64 tensors so that every downstream loss can
backpropagate into them; faces are int64. The UV atlas is a spherical
(longitude/latitude) chart with the seam column duplicated so that no face
interpolates across the wrap-around.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from scipy.spatial import cKDTree


def _as_f64(x):
    return torch.as_tensor(x, dtype=torch.float64)


@dataclass
class Mesh:
    vertices: torch.Tensor  # (V, 3) float64
    faces: torch.Tensor     # (F, 3) int64, CCW
    uv: torch.Tensor | None = None  # (V, 2) in [0, 1]^2

    def __post_init__(self):
        self.vertices = _as_f64(self.vertices)
        self.faces = torch.as_tensor(self.faces, dtype=torch.int64)
        if self.uv is not None:
            self.uv = _as_f64(self.uv)
        if self.faces.numel() and int(self.faces.max()) >= self.n_vertices:
            raise ValueError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices: torch.Tensor) -> "Mesh":
        return replace(self, vertices=vertices)


@dataclass
class Deformation:
    offsets: torch.Tensor  # (V, 3)

    def __post_init__(self):
        self.offsets = _as_f64(self.offsets)


@dataclass
class UVMapping:
    """Fixed texel -> surface assignment: face index + barycentric weights."""

    face_index: np.ndarray  # (H_uv, W_uv) int64
    barycentric: np.ndarray  # (H_uv, W_uv, 3), rows on the simplex

    @property
    def shape(self) -> tuple[int, int]:
        return self.face_index.shape

    def surface_points(self, mesh: Mesh) -> torch.Tensor:
        """Per-texel 3D point on the mesh surface, (H_uv, W_uv, 3)."""
        fidx = torch.as_tensor(self.face_index.reshape(-1))
        bary = torch.as_tensor(self.barycentric.reshape(-1, 3))
        tri = mesh.vertices[mesh.faces[fidx]]  # (T, 3, 3)
        pts = (bary[:, :, None] * tri).sum(dim=1)
        return pts.reshape(*self.face_index.shape, 3)


def texel_centers(h_uv: int, w_uv: int) -> np.ndarray:
    """(H_uv, W_uv, 2) uv coordinates of texel centers, u fastest along axis 1."""
    u = (np.arange(w_uv) + 0.5) / w_uv
    v = (np.arange(h_uv) + 0.5) / h_uv
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


# ---------------------------------------------------------------------------
# Icosphere template
# ---------------------------------------------------------------------------

def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return verts, faces


def _subdivide(verts: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    verts = list(verts)
    midpoint: dict[tuple[int, int], int] = {}

    def mid(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        if key not in midpoint:
            p = (verts[a] + verts[b]) / 2.0
            p /= np.linalg.norm(p)
            midpoint[key] = len(verts)
            verts.append(p)
        return midpoint[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return np.array(verts), np.array(out, dtype=np.int64)


def make_sphere(subdivisions: int) -> Mesh:
    """Unit icosphere with 20 * 4**subdivisions faces and spherical UVs.

    The longitude seam is handled by duplicating seam vertices so that every
    face's uv triangle is free of wrap-around; pole vertices are duplicated
    per incident face with the mean longitude of the face's other corners.
    """
    if not (0 <= subdivisions <= 6):
        raise ValueError(f"subdivisions must be in [0, 6], got {subdivisions}")
    verts, faces = _icosahedron()
    for _ in range(subdivisions):
        verts, faces = _subdivide(verts, faces)

    x, y, z = verts[:, 0], verts[:, 1], verts[:, 2]
    is_pole = (np.abs(x) < 1e-12) & (np.abs(y) < 1e-12)
    u = np.arctan2(y, x) / (2.0 * np.pi) + 0.5
    v = 0.5 + np.arcsin(np.clip(z, -1.0, 1.0)) / np.pi

    # Per-face corner uv with seam unwrap, then weld (vertex, u) pairs.
    corner_u = np.empty(faces.shape, dtype=np.float64)
    for fi, face in enumerate(faces):
        cu = u[face].copy()
        pole = is_pole[face]
        reg = ~pole
        if reg.sum() >= 2 and cu[reg].max() - cu[reg].min() > 0.5:
            cu[reg & (cu < 0.5)] += 1.0
        if pole.any():
            cu[pole] = cu[reg].mean() if reg.any() else 0.5
        corner_u[fi] = cu

    umax = corner_u.max()
    if umax > 1.0:
        corner_u = corner_u / umax

    key_to_new: dict[tuple[int, int], int] = {}
    new_verts, new_uv, new_faces = [], [], []
    for fi, face in enumerate(faces):
        tri = []
        for ci, vi in enumerate(face):
            uu = corner_u[fi, ci]
            key = (int(vi), int(round(uu * 1e9)))
            if key not in key_to_new:
                key_to_new[key] = len(new_verts)
                new_verts.append(verts[vi])
                new_uv.append([uu, v[vi]])
            tri.append(key_to_new[key])
        new_faces.append(tri)

    return Mesh(np.array(new_verts), np.array(new_faces, dtype=np.int64),
                np.clip(np.array(new_uv), 0.0, 1.0))


def weld_vertices(mesh: Mesh, decimals: int = 9) -> tuple[np.ndarray, np.ndarray]:
    """Merge positionally-identical vertices; returns (welded verts, faces)."""
    verts = mesh.vertices.detach().numpy()
    keys = np.round(verts, decimals)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    faces = inverse[mesh.faces.numpy()]
    return uniq, faces


def is_watertight(mesh: Mesh) -> bool:
    """Every geometric edge (after position welding) borders exactly 2 faces."""
    _, faces = weld_vertices(mesh)
    counts: dict[tuple[int, int], int] = {}
    for a, b, c in faces:
        for e in ((a, b), (b, c), (c, a)):
            key = (min(e), max(e))
            counts[key] = counts.get(key, 0) + 1
    return bool(counts) and all(n == 2 for n in counts.values())


# ---------------------------------------------------------------------------
# UV mapping (texel -> face + barycentric)
# ---------------------------------------------------------------------------

def build_uv_mapping(mesh: Mesh, h_uv: int, w_uv: int) -> UVMapping:
    """Assign every texel center to a face of the uv atlas.

    Texels inside some uv triangle get that face (smallest index on overlap);
    texels outside every triangle inherit the nearest covered texel's entry,
    so the full grid is defined.
    """
    if mesh.uv is None:
        raise ValueError("mesh has no uv coordinates")
    if h_uv < 8 or w_uv < 8:
        raise ValueError("uv grid must be at least 8x8")

    centers = texel_centers(h_uv, w_uv).reshape(-1, 2)
    uv = mesh.uv.detach().numpy()
    faces = mesh.faces.numpy()
    n_tex = centers.shape[0]
    face_idx = np.full(n_tex, -1, dtype=np.int64)
    bary = np.zeros((n_tex, 3), dtype=np.float64)

    eps = 1e-9
    unassigned = np.ones(n_tex, dtype=bool)
    for fi, face in enumerate(faces):
        if not unassigned.any():
            break
        a, b, c = uv[face[0]], uv[face[1]], uv[face[2]]
        det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        if abs(det) < 1e-14:
            continue
        p = centers[unassigned]
        w1 = ((p[:, 0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[:, 1] - a[1])) / det
        w2 = ((b[0] - a[0]) * (p[:, 1] - a[1]) - (p[:, 0] - a[0]) * (b[1] - a[1])) / det
        w0 = 1.0 - w1 - w2
        inside = (w0 >= -eps) & (w1 >= -eps) & (w2 >= -eps)
        idx = np.where(unassigned)[0][inside]
        face_idx[idx] = fi
        w = np.stack([w0[inside], w1[inside], w2[inside]], axis=1)
        w = np.clip(w, 0.0, None)
        bary[idx] = w / w.sum(axis=1, keepdims=True)
        unassigned[idx] = False

    covered = face_idx >= 0
    if not covered.any():
        raise ValueError("no texel is covered by any uv triangle")
    if (~covered).any():
        tree = cKDTree(centers[covered])
        _, nn = tree.query(centers[~covered])
        src = np.where(covered)[0][nn]
        face_idx[~covered] = face_idx[src]
        bary[~covered] = bary[src]

    return UVMapping(face_idx.reshape(h_uv, w_uv), bary.reshape(h_uv, w_uv, 3))


# ---------------------------------------------------------------------------
# Deformation + regularizers
# ---------------------------------------------------------------------------

def apply_deformation(template: Mesh, d: Deformation) -> Mesh:
    if d.offsets.shape != template.vertices.shape:
        raise ValueError("offset count does not match vertex count")
    return template.with_vertices(template.vertices + d.offsets)


def _unique_edges(faces: torch.Tensor) -> torch.Tensor:
    e = torch.cat([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], dim=0)
    e = torch.sort(e, dim=1).values
    return torch.unique(e, dim=0)


def laplacian_energy(mesh: Mesh) -> torch.Tensor:
    """Sum over vertices of || v_i - mean of neighbors ||^2 (uniform weights)."""
    edges = _unique_edges(mesh.faces)
    n = mesh.n_vertices
    idx = torch.cat([edges[:, 0], edges[:, 1]])
    nbr = torch.cat([edges[:, 1], edges[:, 0]])
    deg = torch.zeros(n, dtype=torch.float64).index_add_(
        0, idx, torch.ones(idx.shape[0], dtype=torch.float64))
    nbr_sum = torch.zeros(n, 3, dtype=torch.float64).index_add_(
        0, idx, mesh.vertices[nbr])
    connected = deg > 0
    mean = nbr_sum[connected] / deg[connected, None]
    diff = mesh.vertices[connected] - mean
    return (diff * diff).sum()


def edge_regularizer(mesh: Mesh) -> torch.Tensor:
    """Mean squared edge length over unique edges."""
    edges = _unique_edges(mesh.faces)
    d = mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]]
    return (d * d).sum(dim=1).mean()


def sample_uv_grid(grid: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample an (H, W, C) uv-space grid at uv points in [0,1]^2.

    Texel (r, c) is centered at ((c+0.5)/W, (r+0.5)/H); samples are clamped to
    the border. Differentiable w.r.t. `grid`.
    """
    h, w = grid.shape[0], grid.shape[1]
    cf = torch.clamp(uv[..., 0] * w - 0.5, 0.0, w - 1.0)
    rf = torch.clamp(uv[..., 1] * h - 0.5, 0.0, h - 1.0)
    c0 = cf.floor().long().clamp(0, w - 1)
    r0 = rf.floor().long().clamp(0, h - 1)
    c1 = (c0 + 1).clamp(0, w - 1)
    r1 = (r0 + 1).clamp(0, h - 1)
    fc = (cf - c0.double())[..., None]
    fr = (rf - r0.double())[..., None]
    top = grid[r0, c0] * (1 - fc) + grid[r0, c1] * fc
    bot = grid[r1, c0] * (1 - fc) + grid[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def vertex_part_labels(mesh: Mesh, canonical_probs: torch.Tensor) -> torch.Tensor:
    """Per-vertex part index: argmax of the canonical map sampled at each uv.

    Ties break toward the lowest part index.
    """
    probs = sample_uv_grid(_as_f64(canonical_probs), mesh.uv)
    return probs.argmax(dim=-1)


# ---------------------------------------------------------------------------
# Wavefront OBJ
# ---------------------------------------------------------------------------

def save_obj(path, mesh: Mesh) -> None:
    verts = mesh.vertices.detach().numpy()
    with open(path, "w") as f:
        for p in verts:
            f.write("v %.9g %.9g %.9g\n" % (p[0], p[1], p[2]))
        if mesh.uv is not None:
            for t in mesh.uv.detach().numpy():
                f.write("vt %.9g %.9g\n" % (t[0], t[1]))
            for a, b, c in mesh.faces.numpy() + 1:
                f.write(f"f {a}/{a} {b}/{b} {c}/{c}\n")
        else:
            for a, b, c in mesh.faces.numpy() + 1:
                f.write(f"f {a} {b} {c}\n")


def load_obj(path) -> Mesh:
    verts, uvs, faces = [], [], []
    with open(path) as f:
        for line in f:
            parts = line.strip().split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    uv = np.array(uvs) if uvs else None
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64), uv)
