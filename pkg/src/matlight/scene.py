"""Triangle meshes, cameras, and the scene bundle fed to the renderer.

Meshes are indexed triangle soups with per-vertex normals and UVs in a
single index space. Wavefront OBJ files (v/vn/vt/f records) are the
on-disk format; OBJ's separate index spaces are unified on load.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bvh as _bvh
from .textures import EnvironmentMap, MaterialTexture


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    normals: np.ndarray  # (V, 3) float64, unit length
    uvs: np.ndarray | None  # (V, 2) float64 in [0, 1]^2, None if absent
    faces: np.ndarray  # (F, 3) int32

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.uvs is not None:
            self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        self.faces = np.asarray(self.faces, dtype=np.int32).reshape(-1, 3)

    def validate(self) -> None:
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("triangle index out of range")
        norms = np.linalg.norm(self.normals, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-4):
            raise MeshError("vertex normals are not unit length")
        if self.uvs is not None and not np.isfinite(self.uvs).all():
            raise MeshError("non-finite UVs")
        if not np.isfinite(self.vertices).all():
            raise MeshError("non-finite vertex positions")

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))

    def face_geometric_normals(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(length, 1e-30)


def compute_vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals from face geometry.

    The cross product of the edge vectors carries the triangle area, so
    accumulating the raw cross products and normalizing at the end gives
    the area weighting for free.
    """
    acc = np.zeros_like(vertices)
    fn = np.cross(
        vertices[faces[:, 1]] - vertices[faces[:, 0]],
        vertices[faces[:, 2]] - vertices[faces[:, 0]],
    )
    for k in range(3):
        np.add.at(acc, faces[:, k], fn)
    length = np.linalg.norm(acc, axis=1, keepdims=True)
    out = acc / np.maximum(length, 1e-30)
    out[length[:, 0] <= 1e-30] = (0.0, 0.0, 1.0)
    return out


def load_mesh(path) -> TriangleMesh:
    """Load a Wavefront-style mesh (v/vn/vt/f records).

    OBJ keeps separate index spaces for positions, UVs, and normals;
    vertices are split on unique (v, vt, vn) triples. Missing normals
    are computed from face geometry (area weighted). Missing UVs leave
    ``uvs=None``; material decomposition requires UVs and the scene
    loader rejects such meshes, but plain geometry uses are allowed.
    Non-manifold input is accepted as-is.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mesh file not found: {path}")
    positions: list[tuple[float, ...]] = []
    texcoords: list[tuple[float, ...]] = []
    normals: list[tuple[float, ...]] = []
    corners: list[tuple[int, int, int]] = []  # (v, vt, vn) indices, -1 if absent
    face_sizes: list[int] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v":
                positions.append(tuple(float(x) for x in parts[1:4]))
            elif tag == "vt":
                texcoords.append(tuple(float(x) for x in parts[1:3]))
            elif tag == "vn":
                normals.append(tuple(float(x) for x in parts[1:4]))
            elif tag == "f":
                refs = parts[1:]
                if len(refs) < 3:
                    raise MeshError(f"{path}:{lineno}: face with fewer than 3 vertices")
                for ref in refs:
                    fields = ref.split("/")
                    vi = int(fields[0])
                    ti = int(fields[1]) if len(fields) > 1 and fields[1] else 0
                    ni = int(fields[2]) if len(fields) > 2 and fields[2] else 0
                    # OBJ indices are 1-based; negatives reference from the end
                    vi = vi - 1 if vi > 0 else len(positions) + vi
                    ti = ti - 1 if ti > 0 else (len(texcoords) + ti if ti < 0 else -1)
                    ni = ni - 1 if ni > 0 else (len(normals) + ni if ni < 0 else -1)
                    corners.append((vi, ti, ni))
                face_sizes.append(len(refs))
        except (ValueError, IndexError) as e:
            raise MeshError(f"{path}:{lineno}: cannot parse {line!r}") from e
    if not positions or not face_sizes:
        raise MeshError(f"{path}: no geometry found")

    # unify (v, vt, vn) triples into a single vertex index space
    remap: dict[tuple[int, int, int], int] = {}
    order: list[tuple[int, int, int]] = []
    unified = []
    for c in corners:
        idx = remap.get(c)
        if idx is None:
            idx = len(order)
            remap[c] = idx
            order.append(c)
        unified.append(idx)

    faces = []
    k = 0
    for size in face_sizes:
        for i in range(1, size - 1):  # fan triangulation
            faces.append((unified[k], unified[k + i], unified[k + i + 1]))
        k += size
    faces = np.asarray(faces, dtype=np.int32)

    verts = np.asarray([positions[c[0]] for c in order], dtype=np.float64)
    has_uv = any(c[1] >= 0 for c in order)
    has_n = any(c[2] >= 0 for c in order)
    uvs = None
    if has_uv:
        uvs = np.asarray([texcoords[c[1]] if c[1] >= 0 else (0.0, 0.0) for c in order])
    if has_n:
        nrm = np.asarray([normals[c[2]] if c[2] >= 0 else (0.0, 0.0, 0.0) for c in order])
        length = np.linalg.norm(nrm, axis=1, keepdims=True)
        nrm = np.where(length > 1e-12, nrm / np.maximum(length, 1e-30), nrm)
        bad = length[:, 0] <= 1e-12
        if bad.any():
            nrm[bad] = compute_vertex_normals(verts, faces)[bad]
    else:
        nrm = compute_vertex_normals(verts, faces)

    mesh = TriangleMesh(verts, nrm, uvs, faces)
    mesh.validate()
    return mesh


def save_mesh(mesh: TriangleMesh, path) -> None:
    lines = ["# matlight mesh"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    if mesh.uvs is not None:
        for t in mesh.uvs:
            lines.append(f"vt {t[0]:.9g} {t[1]:.9g}")
    for n in mesh.normals:
        lines.append(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
    for f in mesh.faces:
        if mesh.uvs is not None:
            lines.append("f " + " ".join(f"{i + 1}/{i + 1}/{i + 1}" for i in f))
        else:
            lines.append("f " + " ".join(f"{i + 1}//{i + 1}" for i in f))
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("\n".join(lines) + "\n")


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid transform.

    Camera space: x right, y up, looking down -z. Pixel (0, 0) is the
    top-left corner; rays go through pixel centers.
    """

    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,), x_cam = R @ x_world + t
    focal: float  # pixels
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def validate(self) -> None:
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if not math.isclose(float(np.linalg.det(r)), 1.0, abs_tol=1e-6):
            raise ValueError("camera rotation has det != +1")

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fov_deg=45.0, width=64, height=64):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        # rows of R are the camera axes (x=right, y=up, z=-forward)
        rot = np.stack([right, true_up, -fwd])
        trans = -rot @ eye
        focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(rot, trans, focal, width / 2.0, height / 2.0, width, height)

    def primary_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions for all pixel centers, row-major."""
        j, i = np.meshgrid(np.arange(self.width), np.arange(self.height))
        x = (j + 0.5 - self.cx) / self.focal
        y = -(i + 0.5 - self.cy) / self.focal
        d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1).reshape(-1, 3)
        d_world = d_cam @ self.rotation  # == R.T @ d per ray
        d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
        origins = np.broadcast_to(self.position, d_world.shape).copy()
        return origins, d_world

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "focal": self.focal,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            np.asarray(d["rotation"]), np.asarray(d["translation"]),
            float(d["focal"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
        )


def save_cameras(cameras: list[Camera], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def load_cameras(path) -> list[Camera]:
    return [Camera.from_dict(d) for d in json.loads(Path(path).read_text())]


# Shadow-ray origins move this fraction of the bbox diagonal along the
# geometric normal to dodge self-intersection.
SHADOW_EPS_FRACTION = 1e-4


@dataclass
class Scene:
    mesh: TriangleMesh
    albedo: MaterialTexture
    roughness: MaterialTexture
    env: EnvironmentMap
    cameras: list[Camera] = field(default_factory=list)
    _accel: "_bvh.AccelStructure | None" = field(default=None, repr=False, compare=False)

    def validate(self, require_uvs: bool = True) -> None:
        self.mesh.validate()
        if require_uvs and self.mesh.uvs is None:
            raise MeshError("mesh has no UVs; material decomposition requires a UV atlas")
        for cam in self.cameras:
            cam.validate()
        self.albedo.validate()
        self.roughness.validate()
        self.env.validate()

    @property
    def accel(self) -> "_bvh.AccelStructure":
        if self._accel is None:
            self._accel = _bvh.AccelStructure.build(self.mesh.vertices, self.mesh.faces)
        return self._accel

    @property
    def shadow_eps(self) -> float:
        return SHADOW_EPS_FRACTION * self.mesh.bbox_diagonal
