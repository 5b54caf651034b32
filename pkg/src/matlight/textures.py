"""UV material textures and lat-long environment maps.

Texel (row r, col c) has its center at u = (c + 0.5) / W, v = (r + 0.5) / H.
Texture sampling is bilinear with clamp-to-edge addressing; environment
lookups wrap horizontally (longitude) and clamp vertically (latitude).

Direction convention for the environment map: for a unit direction d,
u = atan2(d.x, -d.z) / (2 pi) + 0.5 and v = acos(d.y) / pi, so d = +y
maps to the top row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROUGHNESS_MIN = 0.01

LUM_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])


def luminance(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb)[..., 0] * LUM_WEIGHTS[0] + \
        np.asarray(rgb)[..., 1] * LUM_WEIGHTS[1] + \
        np.asarray(rgb)[..., 2] * LUM_WEIGHTS[2]


@dataclass
class MaterialTexture:
    """Learnable float grid in UV space with a per-texture clamp range."""

    data: np.ndarray  # (H, W, C), C in {1, 3}
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ValueError(f"texture must be (H, W, 1|3), got {self.data.shape}")

    @classmethod
    def albedo(cls, data) -> "MaterialTexture":
        return cls(data, 0.0, 1.0)

    @classmethod
    def roughness_map(cls, data) -> "MaterialTexture":
        return cls(data, ROUGHNESS_MIN, 1.0)

    @classmethod
    def constant(cls, h, w, value, lo=0.0, hi=1.0) -> "MaterialTexture":
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return cls(np.broadcast_to(value, (h, w, len(value))).copy(), lo, hi)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def clamp(self) -> None:
        np.clip(self.data, self.lo, self.hi, out=self.data)

    def validate(self) -> None:
        if not np.isfinite(self.data).all():
            raise ValueError("non-finite texels")
        if self.data.min() < self.lo - 1e-9 or self.data.max() > self.hi + 1e-9:
            raise ValueError(f"texels outside clamp range [{self.lo}, {self.hi}]")

    def copy(self) -> "MaterialTexture":
        return MaterialTexture(self.data.copy(), self.lo, self.hi)


def _bilinear_indices(w: int, h: int, u: np.ndarray, v: np.ndarray, wrap_u: bool):
    """Corner indices and weights for bilinear interpolation at (u, v)."""
    x = np.asarray(u, dtype=np.float64) * w - 0.5
    y = np.asarray(v, dtype=np.float64) * h - 0.5
    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = x - x0f
    fy = y - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    if wrap_u:
        x0 %= w
        x1 %= w
    else:
        x0 = np.clip(x0, 0, w - 1)
        x1 = np.clip(x1, 0, w - 1)
    y0 = np.clip(y0, 0, h - 1)
    y1 = np.clip(y1, 0, h - 1)
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    return (y0, x0, w00), (y0, x1, w10), (y1, x0, w01), (y1, x1, w11)


def _bilinear_gather(data: np.ndarray, corners) -> np.ndarray:
    w = data.shape[1]
    flat = data.reshape(-1, data.shape[2])
    out = None
    for ry, cx, wt in corners:
        term = flat[(ry * w + cx).ravel()].reshape(wt.shape + (data.shape[2],)) * wt[..., None]
        out = term if out is None else out + term
    return out


def bilinear_scatter(shape, corners, values: np.ndarray) -> np.ndarray:
    """Adjoint of the bilinear gather: spread `values` to the 4 corner texels."""
    out = np.zeros(shape, dtype=np.float64)
    flat = out.reshape(-1, shape[2])
    w = shape[1]
    for ry, cx, wt in corners:
        np.add.at(flat, (ry * w + cx).ravel(),
                  (values * wt[..., None]).reshape(-1, shape[2]))
    return out


def sample_texture(texture: MaterialTexture, uv: np.ndarray) -> np.ndarray:
    """Bilinear texture lookup with clamp-to-edge addressing.

    `uv` is (..., 2); the result is (..., C).
    """
    uv = np.asarray(uv, dtype=np.float64)
    corners = _bilinear_indices(texture.width, texture.height, uv[..., 0], uv[..., 1], wrap_u=False)
    return _bilinear_gather(texture.data, corners)


def texture_corners(texture: MaterialTexture, uv: np.ndarray):
    uv = np.asarray(uv, dtype=np.float64)
    return _bilinear_indices(texture.width, texture.height, uv[..., 0], uv[..., 1], wrap_u=False)


@dataclass
class EnvironmentMap:
    """Lat-long HDR radiance grid with a luminance CDF for light sampling.

    The sampling distribution is proportional to luminance(texel) times
    sin(theta) of the texel row, which is proportional to energy per
    texel. `rebuild_cdf` must be called after mutating `data`.
    """

    data: np.ndarray  # (H, W, 3) nonnegative linear radiance
    _marginal_cdf: np.ndarray = field(default=None, repr=False, compare=False)
    _row_cdf: np.ndarray = field(default=None, repr=False, compare=False)
    _row_keys: np.ndarray = field(default=None, repr=False, compare=False)
    _weights: np.ndarray = field(default=None, repr=False, compare=False)
    _total: float = field(default=0.0, repr=False, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"environment map must be (H, W, 3), got {self.data.shape}")
        self.rebuild_cdf()

    @classmethod
    def constant(cls, h, w, value) -> "EnvironmentMap":
        value = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,))
        return cls(np.broadcast_to(value, (h, w, 3)).copy())

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def validate(self) -> None:
        if not np.isfinite(self.data).all():
            raise ValueError("non-finite environment radiance")
        if self.data.min() < 0:
            raise ValueError("negative environment radiance")
        if self._total > 0:
            if np.any(np.diff(self._marginal_cdf) < -1e-12):
                raise ValueError("marginal CDF not monotone")
            if not np.isclose(self._marginal_cdf[-1], 1.0):
                raise ValueError("marginal CDF does not end at 1")

    def rebuild_cdf(self) -> None:
        h, w = self.height, self.width
        theta = (np.arange(h) + 0.5) * np.pi / h
        wts = luminance(self.data) * np.sin(theta)[:, None]
        self._weights = wts
        self._total = float(wts.sum())
        if self._total <= 0.0:
            self._marginal_cdf = None
            self._row_cdf = None
            self._row_keys = None
            return
        row_sum = wts.sum(axis=1)
        marginal = np.cumsum(row_sum)
        self._marginal_cdf = marginal / marginal[-1]
        cond = np.cumsum(wts, axis=1)
        # rows with zero mass keep a uniform conditional so searchsorted stays valid
        safe = np.where(row_sum > 0, row_sum, 1.0)[:, None]
        self._row_cdf = np.where(row_sum[:, None] > 0, cond / safe,
                                 (np.arange(1, w + 1) / w)[None, :])
        # row r occupies value range [2r, 2r + 1]; lets one searchsorted
        # resolve per-sample column lookups across different rows
        self._row_keys = (self._row_cdf + 2.0 * np.arange(h)[:, None]).ravel()

    def copy(self) -> "EnvironmentMap":
        return EnvironmentMap(self.data.copy())

    # -- direction <-> lat-long mapping -------------------------------------

    @staticmethod
    def dir_to_uv(dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = np.asarray(dirs, dtype=np.float64)
        u = np.arctan2(d[..., 0], -d[..., 2]) / (2 * np.pi) + 0.5
        v = np.arccos(np.clip(d[..., 1], -1.0, 1.0)) / np.pi
        return u, v

    @staticmethod
    def uv_to_dir(u: np.ndarray, v: np.ndarray) -> np.ndarray:
        theta = np.asarray(v) * np.pi
        phi = (np.asarray(u) - 0.5) * 2 * np.pi
        st = np.sin(theta)
        return np.stack([st * np.sin(phi), np.cos(theta), -st * np.cos(phi)], axis=-1)

    def lookup_corners(self, dirs: np.ndarray):
        u, v = self.dir_to_uv(dirs)
        return _bilinear_indices(self.width, self.height, u, v, wrap_u=True)

    def lookup(self, dirs: np.ndarray) -> np.ndarray:
        """Bilinear radiance lookup for unit directions (..., 3)."""
        return _bilinear_gather(self.data, self.lookup_corners(dirs))

    # -- importance sampling -------------------------------------------------

    def sample(self, u1: np.ndarray, u2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Draw directions proportional to luminance * sin(theta).

        Returns (directions (..., 3), pdf in solid-angle measure). An
        all-black map falls back to uniform sphere sampling, pdf 1/4pi.
        """
        u1 = np.asarray(u1, dtype=np.float64)
        u2 = np.asarray(u2, dtype=np.float64)
        if self._total <= 0.0:
            z = 1.0 - 2.0 * u1
            phi = 2 * np.pi * u2
            s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
            d = np.stack([s * np.cos(phi), z, s * np.sin(phi)], axis=-1)
            return d, np.full(u1.shape, 1.0 / (4 * np.pi))
        h, w = self.height, self.width
        rows = np.searchsorted(self._marginal_cdf, u1, side="right")
        rows = np.clip(rows, 0, h - 1)
        prev = np.where(rows > 0, self._marginal_cdf[rows - 1], 0.0)
        seg = self._marginal_cdf[rows] - prev
        frac_v = np.where(seg > 0, (u1 - prev) / np.maximum(seg, 1e-300), 0.5)
        v = (rows + np.clip(frac_v, 0.0, 1.0 - 1e-12)) / h

        keys = 2.0 * rows + np.clip(u2, 0.0, 1.0 - 1e-16)
        pos = np.searchsorted(self._row_keys, keys, side="right")
        cols = np.clip(pos - rows * w, 0, w - 1)
        prev_c = np.where(cols > 0, self._row_cdf[rows, np.maximum(cols - 1, 0)], 0.0)
        seg_c = self._row_cdf[rows, cols] - prev_c
        frac_u = np.where(seg_c > 0, (u2 - prev_c) / np.maximum(seg_c, 1e-300), 0.5)
        u = (cols + np.clip(frac_u, 0.0, 1.0 - 1e-12)) / w

        dirs = self.uv_to_dir(u, v)
        pdf = self._pdf_from_texel(rows, cols, v)
        return dirs, pdf

    def _pdf_from_texel(self, rows, cols, v):
        sin_theta = np.maximum(np.sin(np.asarray(v) * np.pi), 1e-9)
        return self._weights[rows, cols] * self.width * self.height / (
            self._total * 2.0 * np.pi ** 2 * sin_theta)

    def pdf(self, dirs: np.ndarray) -> np.ndarray:
        """Solid-angle pdf of `sample` at the given unit directions."""
        d = np.asarray(dirs, dtype=np.float64)
        if self._total <= 0.0:
            return np.full(d.shape[:-1], 1.0 / (4 * np.pi))
        u, v = self.dir_to_uv(d)
        cols = np.clip((u * self.width).astype(np.int64), 0, self.width - 1)
        rows = np.clip((v * self.height).astype(np.int64), 0, self.height - 1)
        return self._pdf_from_texel(rows, cols, v)


def env_lookup(env: EnvironmentMap, direction) -> np.ndarray:
    return env.lookup(np.asarray(direction))


def env_sample(env: EnvironmentMap, u1, u2):
    return env.sample(np.asarray(u1), np.asarray(u2))


def uv_footprint(mesh, width: int, height: int, dilate: int = 1) -> np.ndarray:
    """Texels covered by the mesh's UV triangles, as an (H, W) bool mask.

    A texel counts as covered when its center lies inside a UV triangle;
    `dilate` grows the mask to include the bilinear support of samples
    near triangle edges.
    """
    if mesh.uvs is None:
        raise ValueError("mesh has no UVs")
    mask = np.zeros((height, width), dtype=bool)
    uv = mesh.uvs
    for f in mesh.faces:
        tri = uv[f] * (width, height)  # texel-space coordinates
        lo = np.floor(tri.min(axis=0) - 0.5).astype(int)
        hi = np.ceil(tri.max(axis=0) + 0.5).astype(int)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, (width - 1, height - 1))
        if (hi < lo).any():
            continue
        xs = np.arange(lo[0], hi[0] + 1) + 0.5
        ys = np.arange(lo[1], hi[1] + 1) + 0.5
        px, py = np.meshgrid(xs, ys)
        a, b, c = tri
        det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(det) < 1e-14:
            continue
        l1 = ((px - a[0]) * (c[1] - a[1]) - (py - a[1]) * (c[0] - a[0])) / det
        l2 = ((b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])) / det
        inside = (l1 >= -1e-9) & (l2 >= -1e-9) & (l1 + l2 <= 1 + 1e-9)
        mask[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1] |= inside
    for _ in range(dilate):
        grown = mask.copy()
        grown[1:] |= mask[:-1]
        grown[:-1] |= mask[1:]
        grown[:, 1:] |= mask[:, :-1]
        grown[:, :-1] |= mask[:, 1:]
        mask = grown
    return mask
