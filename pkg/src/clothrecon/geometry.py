"""Mesh, state and camera types plus rest-state precomputation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DegenerateFace, IndexOutOfRange, ShapeMismatch


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TemplateMesh:
    """Fixed-topology triangle mesh in its rest configuration.

    Besides the user supplied ``vertices``, ``faces`` and ``uvs`` it carries the
    rest-state quantities the simulator and renderer need: per-face area, the
    inverse rest-edge matrix expressed in a local 2D frame, the warp direction
    of the fabric inside that frame, and the unique edge list with the faces on
    either side (``-1`` marks a boundary edge).
    """

    vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (F, 3) int
    uvs: np.ndarray  # (N, 2)
    rest_areas: np.ndarray  # (F,)
    material_frames: np.ndarray  # (F, 2, 2)
    edges: np.ndarray  # (E, 2) int, sorted vertex pairs
    edge_faces: np.ndarray  # (E, 2) int
    frame_axes: np.ndarray  # (F, 2, 3): local x and y axes of each face
    warp: np.ndarray  # (F, 2): unit warp direction in the local frame

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def interior_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_faces[:, 1] >= 0)

    @property
    def total_area(self) -> float:
        return float(self.rest_areas.sum())


def _edge_topology(faces: np.ndarray, n_faces: int):
    half = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    owner = np.tile(np.arange(n_faces), 3)
    key = np.sort(half, axis=1)
    edges, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    edge_faces = np.full((len(edges), 2), -1, dtype=np.int64)
    counts = np.zeros(len(edges), dtype=np.int64)
    # deterministic order: half-edges are visited by face index within each pass
    order = np.lexsort((owner, inverse))
    for h in order:
        e = inverse[h]
        if counts[e] >= 2:
            raise DegenerateFace(f"edge {tuple(edges[e])} is shared by more than two faces")
        edge_faces[e, counts[e]] = owner[h]
        counts[e] += 1
    return edges.astype(np.int64), edge_faces


def build_template(vertices, faces, uvs=None) -> TemplateMesh:
    """Validate a triangle mesh and precompute its rest-state data.

    When ``uvs`` is omitted, texture coordinates are produced by projecting the
    rest vertices onto their best-fit plane and normalising to the unit square.
    """
    x = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ShapeMismatch(f"vertices must be (N, 3), got {x.shape}")
    if f.ndim != 2 or f.shape[1] != 3:
        raise ShapeMismatch(f"faces must be (F, 3), got {f.shape}")
    f = f.astype(np.int64)
    n = x.shape[0]
    if f.size and (f.min() < 0 or f.max() >= n):
        raise IndexOutOfRange(f"face index outside [0, {n})")
    if not np.all(np.isfinite(x)):
        raise ValueError("vertices contain non-finite values")

    if uvs is None:
        uv = planar_uvs(x)
    else:
        uv = np.asarray(uvs, dtype=np.float64)
        if uv.shape != (n, 2):
            raise ShapeMismatch(f"uvs must be ({n}, 2), got {uv.shape}")
        if np.any(uv < 0.0) or np.any(uv > 1.0):
            raise ValueError("uvs must lie in [0, 1]^2")

    repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    if np.any(repeated):
        raise DegenerateFace(f"face {int(np.flatnonzero(repeated)[0])} repeats a vertex index")

    e1 = x[f[:, 1]] - x[f[:, 0]]
    e2 = x[f[:, 2]] - x[f[:, 0]]
    cr = np.cross(e1, e2)
    twice_area = np.linalg.norm(cr, axis=1)
    scale = np.maximum(np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1), 1e-300)
    bad = twice_area <= 1e-12 * scale
    if np.any(bad):
        raise DegenerateFace(f"face {int(np.flatnonzero(bad)[0])} has zero rest area")
    areas = 0.5 * twice_area

    t1 = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    nrm = cr / twice_area[:, None]
    t2 = np.cross(nrm, t1)
    dm = np.empty((len(f), 2, 2))
    dm[:, 0, 0] = np.einsum("ij,ij->i", e1, t1)
    dm[:, 1, 0] = np.einsum("ij,ij->i", e1, t2)
    dm[:, 0, 1] = np.einsum("ij,ij->i", e2, t1)
    dm[:, 1, 1] = np.einsum("ij,ij->i", e2, t2)
    dm_inv = np.linalg.inv(dm)

    # warp axis: local direction along which u grows while v stays fixed
    duv = np.stack([uv[f[:, 1]] - uv[f[:, 0]], uv[f[:, 2]] - uv[f[:, 0]]], axis=2)
    jac = duv @ dm_inv
    warp = np.tile([1.0, 0.0], (len(f), 1))
    det = np.linalg.det(jac)
    ok = np.abs(det) > 1e-12
    if np.any(ok):
        d = np.linalg.solve(jac[ok], np.tile([1.0, 0.0], (int(ok.sum()), 1))[..., None])[..., 0]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        warp[ok] = d

    edges, edge_faces = _edge_topology(f, len(f))
    return TemplateMesh(
        vertices=_frozen(x),
        faces=_frozen(f, np.int64),
        uvs=_frozen(uv),
        rest_areas=_frozen(areas),
        material_frames=_frozen(dm_inv),
        edges=_frozen(edges, np.int64),
        edge_faces=_frozen(edge_faces, np.int64),
        frame_axes=_frozen(np.stack([t1, t2], axis=1)),
        warp=_frozen(warp),
    )


def planar_uvs(vertices) -> np.ndarray:
    """Project points onto their principal plane and fit them into [0, 1]^2."""
    x = np.asarray(vertices, dtype=np.float64)
    c = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    p = c @ vt[:2].T
    lo = p.min(axis=0)
    span = max(float((p.max(axis=0) - lo).max()), 1e-12)
    return np.clip((p - lo) / span, 0.0, 1.0)


def grid_template(nx: int = 10, ny: int = 10, size=(0.5, 0.5), origin=(0.0, 0.0, 0.0),
                  axis_u=(1.0, 0.0, 0.0), axis_v=(0.0, 1.0, 0.0)) -> TemplateMesh:
    """Flat rectangular cloth with ``nx * ny`` vertices and alternating diagonals.

    ``axis_u`` is the warp direction; uvs follow the grid so that u runs along it.
    """
    size = np.broadcast_to(np.asarray(size, dtype=np.float64), (2,))
    au = np.asarray(axis_u, dtype=np.float64)
    av = np.asarray(axis_v, dtype=np.float64)
    au = au / np.linalg.norm(au)
    av = av - au * (av @ au)
    av = av / np.linalg.norm(av)
    s = np.linspace(0.0, 1.0, nx)
    t = np.linspace(0.0, 1.0, ny)
    ss, tt = np.meshgrid(s, t, indexing="xy")
    uv = np.stack([ss.ravel(), tt.ravel()], axis=1)
    verts = (np.asarray(origin, dtype=np.float64)
             + np.outer(uv[:, 0] * size[0], au) + np.outer(uv[:, 1] * size[1], av))
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            if (i + j) % 2 == 0:
                faces += [(a, b, d), (a, d, c)]
            else:
                faces += [(a, b, c), (b, d, c)]
    return build_template(verts, np.array(faces), uv)


@dataclass(frozen=True, eq=False)
class SurfaceState:
    positions: np.ndarray
    velocities: np.ndarray
    time_index: int = 1

    def __post_init__(self):
        x = _frozen(self.positions)
        v = _frozen(self.velocities)
        if x.ndim != 2 or x.shape[1] != 3 or x.shape != v.shape:
            raise ShapeMismatch(f"positions {x.shape} and velocities {v.shape} must both be (N, 3)")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ValueError("state contains non-finite values")
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "velocities", v)


def initial_state(template: TemplateMesh) -> SurfaceState:
    return SurfaceState(template.vertices, np.zeros_like(template.vertices), 1)


def rotation_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


@dataclass(frozen=True, eq=False)
class Camera:
    """Static pinhole camera; ``rotation``/``translation`` map world to camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")
        r = _frozen(self.rotation)
        t = _frozen(self.translation)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ShapeMismatch("rotation must be 3x3 and translation a 3-vector")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) >= 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        """Camera at ``eye`` looking at ``target``; image rows grow along ``-up``."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, -np.asarray(up, dtype=np.float64))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        r = np.stack([x, y, z])
        # re-orthonormalise to keep |det R - 1| well under 1e-9
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
        return cls(fx, fy, width / 2 if cx is None else cx, height / 2 if cy is None else cy,
                   width, height, r, -r @ eye)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def project(positions, camera: Camera):
    """Pinhole projection. Returns ``(uv, depth)``; pixel centres sit at half-integers."""
    pc = camera.to_camera(positions)
    z = pc[:, 2]
    if np.any(z <= 0):
        raise BehindCamera(f"{int(np.sum(z <= 0))} point(s) at or behind the camera plane")
    uv = np.stack([camera.fx * pc[:, 0] / z + camera.cx, camera.fy * pc[:, 1] / z + camera.cy], axis=1)
    return uv, z


def unproject(uv, depth, camera: Camera) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    pc = np.stack([(uv[:, 0] - camera.cx) * z / camera.fx, (uv[:, 1] - camera.cy) * z / camera.fy, z], axis=1)
    return (pc - camera.translation) @ camera.rotation


@dataclass(frozen=True, eq=False)
class TextureMap:
    """RGB texture in [0, 1], clamp-to-edge addressing; uv (0, 0) is the top-left texel corner."""

    image: np.ndarray

    def __post_init__(self):
        img = _frozen(self.image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ShapeMismatch(f"texture must be (H, W, 3), got {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ValueError("texels must lie in [0, 1]")
        object.__setattr__(self, "image", img)

    def sample(self, uv) -> np.ndarray:
        return bilinear_sample(self.image, np.asarray(uv, dtype=np.float64))


def bilinear_sample(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    px = uv[..., 0] * w - 0.5
    py = uv[..., 1] * h - 0.5
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0i = np.clip(x0.astype(np.int64), 0, w - 1)
    x1i = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    y0i = np.clip(y0.astype(np.int64), 0, h - 1)
    y1i = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    fx = fx[..., None]
    fy = fy[..., None]
    top = image[y0i, x0i] * (1 - fx) + image[y0i, x1i] * fx
    bot = image[y1i, x0i] * (1 - fx) + image[y1i, x1i] * fx
    return top * (1 - fy) + bot * fy


def face_normals(positions, faces) -> np.ndarray:
    x = np.asarray(positions)
    cr = np.cross(x[faces[:, 1]] - x[faces[:, 0]], x[faces[:, 2]] - x[faces[:, 0]])
    return cr / np.maximum(np.linalg.norm(cr, axis=1, keepdims=True), 1e-300)


def dihedral_angles(positions, template: TemplateMesh) -> np.ndarray:
    """Dihedral angle at every interior edge; pi means locally flat."""
    x = np.asarray(positions)
    idx = template.interior_edges
    e = template.edges[idx]
    ef = template.edge_faces[idx]
    opp = []
    for (a, b), (f0, f1) in zip(e, ef):
        o0 = [v for v in template.faces[f0] if v != a and v != b][0]
        o1 = [v for v in template.faces[f1] if v != a and v != b][0]
        opp.append((o0, o1))
    opp = np.array(opp, dtype=np.int64).reshape(-1, 2)
    x0, x1, x2, x3 = x[e[:, 0]], x[e[:, 1]], x[opp[:, 0]], x[opp[:, 1]]
    n1 = np.cross(x1 - x0, x2 - x0)
    n2 = np.cross(x3 - x0, x1 - x0)
    ed = (x1 - x0) / np.linalg.norm(x1 - x0, axis=1, keepdims=True)
    phi = np.arctan2(np.einsum("ij,ij->i", np.cross(n1, n2), ed), np.einsum("ij,ij->i", n1, n2))
    return np.pi - phi
