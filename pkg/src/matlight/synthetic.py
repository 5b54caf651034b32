"""Synthetic ground-truth scene generation for end-to-end evaluation.

A bundle holds a procedural object (known mesh with UVs, known albedo /
roughness textures), an HDR environment, cameras, and rendered GT
buffers for train views, held-out test views, and the test views under
a second (novel) light. Re-rendering an emitted bundle with its
recorded seeds reproduces the stored buffers bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imgio import read_pfm, write_pfm
from .renderer import RenderBuffers, RenderConfig, render
from .scene import Camera, Scene, TriangleMesh, compute_vertex_normals, load_cameras, \
    load_mesh, save_cameras, save_mesh
from .textures import EnvironmentMap, MaterialTexture


# -- meshes --------------------------------------------------------------------

def _grid_sphere(n_lat: int, n_lon: int, radial_fn=None):
    theta = np.linspace(0.0, np.pi, n_lat + 1)
    phi = np.linspace(0.0, 2.0 * np.pi, n_lon + 1)  # last column duplicates the seam
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    r = np.ones_like(tt) if radial_fn is None else radial_fn(tt, pp)
    x = r * np.sin(tt) * np.cos(pp)
    y = r * np.cos(tt)
    z = r * np.sin(tt) * np.sin(pp)
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    uv = np.stack([pp / (2.0 * np.pi), tt / np.pi], axis=-1).reshape(-1, 2)

    def vid(i, j):
        return i * (n_lon + 1) + j

    faces = []
    for i in range(n_lat):
        for j in range(n_lon):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            if i != n_lat - 1:
                faces.append((a, b, c))
            if i != 0:
                faces.append((a, c, d))
    faces = np.asarray(faces, dtype=np.int32)
    return verts, uv, faces, (n_lat, n_lon)


def _stitch_grid_normals(normals: np.ndarray, n_lat: int, n_lon: int) -> np.ndarray:
    grid = normals.reshape(n_lat + 1, n_lon + 1, 3).copy()
    seam = grid[:, 0] + grid[:, -1]
    grid[:, 0] = grid[:, -1] = seam
    grid[0] = grid[0].mean(axis=0)
    grid[-1] = grid[-1].mean(axis=0)
    flat = grid.reshape(-1, 3)
    return flat / np.maximum(np.linalg.norm(flat, axis=1, keepdims=True), 1e-30)


def make_sphere(n_lat: int = 48, n_lon: int = 96, radius: float = 1.0) -> TriangleMesh:
    verts, uv, faces, _ = _grid_sphere(n_lat, n_lon)
    verts = verts * radius
    normals = verts / np.maximum(np.linalg.norm(verts, axis=1, keepdims=True), 1e-30)
    return TriangleMesh(verts, normals, uv, faces)


def make_blob(n_lat: int = 48, n_lon: int = 96, amplitude: float = 0.18) -> TriangleMesh:
    def radial(tt, pp):
        # phi terms fade at the poles so the surface stays seam- and
        # pole-continuous
        s = np.sin(tt)
        return 1.0 + amplitude * (np.sin(2.0 * tt) * np.cos(3.0 * pp) * s
                                  + 0.6 * np.cos(2.0 * pp + 1.0) * s * s)

    verts, uv, faces, dims = _grid_sphere(n_lat, n_lon, radial)
    normals = _stitch_grid_normals(compute_vertex_normals(verts, faces), *dims)
    return TriangleMesh(verts, normals, uv, faces)


def make_cube(n: int = 12, size: float = 1.4, uv_inset: float = 0.02) -> TriangleMesh:
    """Axis-aligned cube, each face an n x n grid mapped into a 3 x 2 UV atlas."""
    half = size / 2.0
    axes = [  # (normal axis, sign, u axis, v axis)
        (0, +1, 1, 2), (0, -1, 1, 2), (1, +1, 0, 2),
        (1, -1, 0, 2), (2, +1, 0, 1), (2, -1, 0, 1),
    ]
    verts, normals, uvs, faces = [], [], [], []
    for fi, (ax, sign, ua, va) in enumerate(axes):
        tile = np.array([fi % 3, fi // 3], dtype=np.float64)
        base = len(verts)
        lin = np.linspace(-half, half, n + 1)
        for i in range(n + 1):
            for j in range(n + 1):
                p = np.zeros(3)
                p[ax] = sign * half
                p[ua] = lin[j]
                p[va] = lin[i]
                verts.append(p)
                nrm = np.zeros(3)
                nrm[ax] = sign
                normals.append(nrm)
                tuv = np.array([j / n, i / n]) * (1.0 - 2.0 * uv_inset) + uv_inset
                uvs.append((tuv + tile) / np.array([3.0, 2.0]))
        for i in range(n):
            for j in range(n):
                a = base + i * (n + 1) + j
                b, c, d = a + 1, a + n + 2, a + n + 1
                if sign > 0:
                    faces.append((a, b, c))
                    faces.append((a, c, d))
                else:
                    faces.append((a, c, b))
                    faces.append((a, d, c))
    return TriangleMesh(np.asarray(verts), np.asarray(normals), np.asarray(uvs),
                        np.asarray(faces, dtype=np.int32))


def make_plane(size: float = 4.0, y: float = 0.0, n: int = 1) -> TriangleMesh:
    half = size / 2.0
    lin = np.linspace(-half, half, n + 1)
    verts, uvs = [], []
    for i in range(n + 1):
        for j in range(n + 1):
            verts.append((lin[j], y, lin[i]))
            uvs.append((j / n, i / n))
    faces = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b, c, d = a + 1, a + n + 2, a + n + 1
            faces.append((a, b, c))
            faces.append((a, c, d))
    verts = np.asarray(verts, dtype=np.float64)
    normals = np.tile((0.0, 1.0, 0.0), (len(verts), 1))
    return TriangleMesh(verts, normals, np.asarray(uvs), np.asarray(faces, dtype=np.int32))


PRIMITIVES = {"sphere": make_sphere, "cube": make_cube, "blob": make_blob}


# -- procedural textures ---------------------------------------------------------

def checker_texture(res: int, squares: int = 8,
                    color_a=(0.75, 0.30, 0.22), color_b=(0.22, 0.45, 0.78)) -> np.ndarray:
    idx = (np.arange(res) * squares // res)
    cells = (idx[:, None] + idx[None, :]) % 2
    out = np.where(cells[:, :, None] == 0, np.asarray(color_a), np.asarray(color_b))
    return out.astype(np.float64)


def gradient_texture(res: int, lo=0.2, hi=0.8, channels: int = 1, axis: int = 0) -> np.ndarray:
    ramp = np.linspace(lo, hi, res)
    grid = ramp[:, None] if axis == 0 else ramp[None, :]
    return np.broadcast_to(np.broadcast_to(grid, (res, res))[:, :, None], (res, res, channels)).copy()


def noise_texture(res: int, cells: int = 6, lo: float = 0.25, hi: float = 0.85,
                  channels: int = 3, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4E4F4953]))
    coarse = rng.uniform(lo, hi, size=(cells, cells, channels))
    # bilinear upsample of the coarse lattice
    ys = np.linspace(0, cells - 1, res)
    xs = np.linspace(0, cells - 1, res)
    y0 = np.clip(ys.astype(int), 0, cells - 2)
    x0 = np.clip(xs.astype(int), 0, cells - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
            + c10 * fy * (1 - fx) + c11 * fy * fx)


def albedo_pattern(kind: str, res: int, seed: int = 0) -> MaterialTexture:
    if kind == "checker":
        return MaterialTexture.albedo(checker_texture(res))
    if kind == "gradient":
        return MaterialTexture.albedo(gradient_texture(res, 0.15, 0.85, channels=3))
    if kind == "noise":
        return MaterialTexture.albedo(noise_texture(res, seed=seed))
    if kind == "gray":
        return MaterialTexture.constant(res, res, (0.55, 0.55, 0.55))
    raise ValueError(f"unknown albedo pattern {kind!r}")


def roughness_pattern(kind: str, res: int, seed: int = 0) -> MaterialTexture:
    if kind == "constant":
        return MaterialTexture.constant(res, res, (0.6,), lo=0.01, hi=1.0)
    if kind == "gradient":
        return MaterialTexture.roughness_map(gradient_texture(res, 0.3, 0.8, channels=1))
    if kind == "checker":
        tex = checker_texture(res, squares=6, color_a=(0.3,) * 3, color_b=(0.75,) * 3)
        return MaterialTexture.roughness_map(tex[:, :, :1])
    if kind == "noise":
        return MaterialTexture.roughness_map(
            noise_texture(res, cells=5, lo=0.25, hi=0.85, channels=1, seed=seed + 1))
    raise ValueError(f"unknown roughness pattern {kind!r}")


# -- environments ----------------------------------------------------------------

def _env_dirs(h: int, w: int) -> np.ndarray:
    v = (np.arange(h) + 0.5) / h
    u = (np.arange(w) + 0.5) / w
    uu, vv = np.meshgrid(u, v)
    return EnvironmentMap.uv_to_dir(uu, vv)


def env_uniform(h: int, w: int, value=1.0) -> EnvironmentMap:
    return EnvironmentMap.constant(h, w, np.broadcast_to(np.asarray(value, dtype=np.float64), (3,)))


def _blobby_env(h, w, blobs, base) -> EnvironmentMap:
    dirs = _env_dirs(h, w)
    data = np.full((h, w, 3), float(base))
    for center, sharpness, color in blobs:
        c = np.asarray(center, dtype=np.float64)
        c = c / np.linalg.norm(c)
        ang = np.sum(dirs * c, axis=-1)
        data += np.exp((ang - 1.0) * sharpness)[:, :, None] * np.asarray(color)
    return EnvironmentMap(data)


def env_studio(h: int = 32, w: int = 64, tint=None) -> EnvironmentMap:
    blobs = [
        ((0.5, 0.8, 0.2), 14.0, (6.0, 5.6, 5.2)),
        ((-0.7, 0.3, -0.55), 22.0, (2.4, 2.6, 3.2)),
        ((0.1, -0.4, 0.9), 30.0, (1.2, 1.4, 1.8)),
    ]
    env = _blobby_env(h, w, blobs, base=0.12)
    if tint is not None:
        env = EnvironmentMap(env.data * np.asarray(tint, dtype=np.float64))
    return env


def env_novel(h: int = 32, w: int = 64) -> EnvironmentMap:
    blobs = [
        ((-0.6, 0.7, 0.4), 18.0, (5.0, 3.2, 1.6)),
        ((0.8, 0.15, 0.55), 26.0, (1.2, 2.2, 3.6)),
        ((0.0, 0.95, -0.3), 40.0, (2.0, 2.0, 2.4)),
    ]
    return _blobby_env(h, w, blobs, base=0.10)


def env_patch(h: int = 32, w: int = 64, center=(0.35, 0.85, 0.4), half_angle_deg: float = 2.5,
              intensity: float = 60.0, base: float = 0.0) -> EnvironmentMap:
    """Black (or dim) map with one small bright disk; MIS stress scene."""
    dirs = _env_dirs(h, w)
    c = np.asarray(center, dtype=np.float64)
    c /= np.linalg.norm(c)
    cosang = np.sum(dirs * c, axis=-1)
    disk = cosang >= math.cos(math.radians(half_angle_deg))
    data = np.full((h, w, 3), float(base))
    data[disk] = intensity
    return EnvironmentMap(data)


def make_environment(kind: str, h: int, w: int, tint=None) -> EnvironmentMap:
    if kind == "studio":
        return env_studio(h, w, tint)
    if kind == "tinted":
        return env_studio(h, w, tint if tint is not None else (1.0, 0.72, 0.45))
    if kind == "uniform":
        return env_uniform(h, w, 1.0)
    if kind == "patch":
        return env_patch(h, w)
    raise ValueError(f"unknown environment kind {kind!r}")


# -- cameras ----------------------------------------------------------------------

def ring_cameras(count: int, radius: float = 2.8, image_size: int = 128,
                 fov_deg: float = 40.0, elevations=(-35.0, -10.0, 15.0, 40.0, 62.0),
                 phase: float = 0.0) -> list[Camera]:
    cams = []
    golden = 2.399963229728653
    for i in range(count):
        az = phase + i * golden
        el = math.radians(elevations[i % len(elevations)])
        eye = (radius * math.cos(el) * math.cos(az),
               radius * math.sin(el),
               radius * math.cos(el) * math.sin(az))
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), fov_deg=fov_deg,
                                   width=image_size, height=image_size))
    return cams


# -- bundle -----------------------------------------------------------------------

@dataclass
class SceneSpec:
    name: str = "checker-sphere"
    primitive: str = "sphere"
    albedo: str = "checker"
    roughness: str = "gradient"
    texture_res: int = 256
    env_height: int = 32
    env_width: int = 64
    image_size: int = 128
    train_views: int = 12
    test_views: int = 3
    gt_spp: int = 64
    seed: int = 0
    env_kind: str = "studio"
    env_tint: tuple | None = None
    mesh_res: int = 40
    fov_deg: float = 40.0
    camera_radius: float = 2.8


@dataclass
class GTBundle:
    spec: SceneSpec
    scene: Scene  # ground-truth materials and training environment
    novel_env: EnvironmentMap
    train_cameras: list[Camera]
    test_cameras: list[Camera]
    train_buffers: list[RenderBuffers]
    test_buffers: list[RenderBuffers]
    novel_buffers: list[RenderBuffers]  # test views under the novel light
    gt_albedo: MaterialTexture
    gt_roughness: MaterialTexture
    view_seeds: dict = field(default_factory=dict)

    def train_view_data(self):
        from .optimizer import ViewData

        return [ViewData(cam, buf.rgb, buf.mask)
                for cam, buf in zip(self.train_cameras, self.train_buffers)]


def _view_seed(base: int, group: str, index: int) -> int:
    offset = {"train": 0, "test": 100000, "novel": 200000}[group]
    return (base * 1000003 + offset + index) % (1 << 31)


def generate_synthetic_scene(spec: SceneSpec, out_dir=None) -> GTBundle:
    """Build the scene, render all GT buffer sets, optionally save a bundle."""
    if spec.primitive not in PRIMITIVES:
        raise ValueError(f"unknown primitive {spec.primitive!r}")
    if spec.primitive == "cube":
        mesh = make_cube(n=max(4, spec.mesh_res // 4))
    else:
        mesh = PRIMITIVES[spec.primitive](spec.mesh_res, spec.mesh_res * 2)
    albedo = albedo_pattern(spec.albedo, spec.texture_res, spec.seed)
    rough = roughness_pattern(spec.roughness, spec.texture_res, spec.seed)
    env = make_environment(spec.env_kind, spec.env_height, spec.env_width, spec.env_tint)
    novel = env_novel(spec.env_height, spec.env_width)

    total = spec.train_views + spec.test_views
    cams = ring_cameras(total, spec.camera_radius, spec.image_size, spec.fov_deg)
    train_cams = cams[:spec.train_views]
    test_cams = cams[spec.train_views:]

    scene = Scene(mesh, albedo, rough, env, cameras=cams)
    scene.validate()

    def render_set(cameras, environment, group):
        out = []
        for i, cam in enumerate(cameras):
            cfg = RenderConfig(spp=spec.gt_spp, seed=_view_seed(spec.seed, group, i))
            s = Scene(mesh, albedo, rough, environment, cameras=[cam])
            s._accel = scene.accel
            out.append(render(s, cam, cfg))
        return out

    bundle = GTBundle(
        spec=spec, scene=scene, novel_env=novel,
        train_cameras=train_cams, test_cameras=test_cams,
        train_buffers=render_set(train_cams, env, "train"),
        test_buffers=render_set(test_cams, env, "test"),
        novel_buffers=render_set(test_cams, novel, "novel"),
        gt_albedo=albedo, gt_roughness=rough,
        view_seeds={g: [_view_seed(spec.seed, g, i)
                        for i in range(len(train_cams) if g == "train" else len(test_cams))]
                    for g in ("train", "test", "novel")},
    )
    if out_dir is not None:
        save_bundle(bundle, out_dir)
    return bundle


def save_bundle(bundle: GTBundle, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(bundle.scene.mesh, out / "mesh.obj")
    save_cameras(bundle.train_cameras + bundle.test_cameras, out / "cameras.json")
    write_pfm(bundle.scene.env.data, out / "env.pfm")
    write_pfm(bundle.novel_env.data, out / "novel_env.pfm")
    write_pfm(bundle.gt_albedo.data, out / "gt_albedo.pfm")
    write_pfm(bundle.gt_roughness.data, out / "gt_roughness.pfm")
    for group, buffers in (("train", bundle.train_buffers), ("test", bundle.test_buffers),
                           ("novel", bundle.novel_buffers)):
        for i, buf in enumerate(buffers):
            buf.save(out / "views" / f"{group}_{i:03d}", previews=False)
    manifest = {
        "spec": asdict(bundle.spec),
        "train_views": len(bundle.train_cameras),
        "test_views": len(bundle.test_cameras),
        "view_seeds": bundle.view_seeds,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_bundle(path) -> GTBundle:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    spec_d = manifest["spec"]
    if spec_d.get("env_tint") is not None:
        spec_d["env_tint"] = tuple(spec_d["env_tint"])
    spec = SceneSpec(**spec_d)
    mesh = load_mesh(root / "mesh.obj")
    cams = load_cameras(root / "cameras.json")
    n_train = manifest["train_views"]
    albedo = MaterialTexture.albedo(read_pfm(root / "gt_albedo.pfm").astype(np.float64))
    rough = MaterialTexture.roughness_map(read_pfm(root / "gt_roughness.pfm").astype(np.float64))
    env = EnvironmentMap(read_pfm(root / "env.pfm").astype(np.float64))
    novel = EnvironmentMap(read_pfm(root / "novel_env.pfm").astype(np.float64))
    scene = Scene(mesh, albedo, rough, env, cameras=cams)

    def load_group(group, count):
        return [RenderBuffers.load(root / "views" / f"{group}_{i:03d}") for i in range(count)]

    n_test = manifest["test_views"]
    return GTBundle(
        spec=spec, scene=scene, novel_env=novel,
        train_cameras=cams[:n_train], test_cameras=cams[n_train:],
        train_buffers=load_group("train", n_train),
        test_buffers=load_group("test", n_test),
        novel_buffers=load_group("novel", n_test),
        gt_albedo=albedo, gt_roughness=rough,
        view_seeds=manifest["view_seeds"],
    )
