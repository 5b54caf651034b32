"""Monte-Carlo direct-illumination renderer with multiple importance sampling.

Per pixel, one primary ray through the pixel center finds the shading
point; each of the spp shading samples then combines one environment
light sample and one BRDF sample under the balance heuristic. The
diffuse (k_d understood as part of the term) and specular integrand
parts accumulate into separate buffers so rgb = diffuse + specular holds
exactly per sample.

The implementation keeps the sampling distributions (environment CDF,
lobe probabilities, GGX sampling roughness, all pdfs) separate from the
shaded quantities (radiance fetch, BRDF values, albedo AOV). A render
normally uses the same scene for both, but the gradient pass perturbs or
differentiates only the shaded side, which makes the estimator exactly
linear in albedo texels and environment pixels. The balance-heuristic
terms are folded into f * cos / (pdf_light + pdf_brdf) to avoid the
large-ratio intermediates of the textbook weight * estimate form.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import brdf as _brdf
from .imgio import read_pfm, write_pfm, write_png_preview
from .scene import Scene
from .textures import _bilinear_gather, bilinear_scatter, sample_texture, texture_corners

_SPP_CHUNK = 32
_PDF_TINY = 1e-12

STRATEGIES = ("mis", "light", "brdf")
LOBE_MODES = ("full", "diffuse", "specular")


class RenderError(RuntimeError):
    pass


@dataclass
class RenderConfig:
    spp: int = 144
    seed: int = 0
    strategy: str = "mis"
    lobes: str = "full"
    max_shadow_rays: int = 1  # per strategy sample; only 1 is implemented
    max_invalid_fraction: float = 1e-3

    def __post_init__(self):
        alias = {"light-only": "light", "brdf-only": "brdf"}
        self.strategy = alias.get(self.strategy, self.strategy)
        if self.spp < 1:
            raise ValueError("spp must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.lobes not in LOBE_MODES:
            raise ValueError(f"unknown lobe mode {self.lobes!r}")
        if self.max_shadow_rays != 1:
            raise ValueError("only one shadow ray per sample is supported")


@dataclass
class RenderBuffers:
    rgb: np.ndarray  # (H, W, 3) linear radiance
    diffuse: np.ndarray  # (H, W, 3)
    specular: np.ndarray  # (H, W, 3)
    albedo: np.ndarray  # (H, W, 3)
    normal: np.ndarray  # (H, W, 3), signed shading normals
    mask: np.ndarray  # (H, W, 1) in {0, 1}

    NAMES = ("rgb", "diffuse", "specular", "albedo", "normal", "mask")

    def save(self, out_dir, previews: bool = True) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_pfm(np.maximum(self.rgb, 0.0), out / "rgb.pfm")
        write_pfm(np.maximum(self.diffuse, 0.0), out / "diffuse.pfm")
        write_pfm(np.maximum(self.specular, 0.0), out / "specular.pfm")
        write_pfm(np.maximum(self.albedo, 0.0), out / "albedo.pfm")
        # normals are signed; store the usual 0.5 n + 0.5 encoding, zeroed
        # outside the mask so the round trip needs only the mask
        enc = (0.5 * self.normal + 0.5) * self.mask
        write_pfm(np.maximum(enc, 0.0), out / "normal.pfm")
        write_pfm(self.mask, out / "mask.pfm")
        if previews:
            write_png_preview(self.rgb, out / "rgb.png")
            write_png_preview(self.albedo, out / "albedo.png")

    @classmethod
    def load(cls, out_dir) -> "RenderBuffers":
        out = Path(out_dir)
        mask = read_pfm(out / "mask.pfm").astype(np.float64)
        enc = read_pfm(out / "normal.pfm").astype(np.float64)
        normal = (2.0 * enc - 1.0) * mask
        return cls(
            rgb=read_pfm(out / "rgb.pfm").astype(np.float64),
            diffuse=read_pfm(out / "diffuse.pfm").astype(np.float64),
            specular=read_pfm(out / "specular.pfm").astype(np.float64),
            albedo=read_pfm(out / "albedo.pfm").astype(np.float64),
            normal=normal,
            mask=mask,
        )


def mis_weight(pdf_this, pdf_other):
    """Balance heuristic; 0 when both pdfs vanish."""
    pdf_this = np.asarray(pdf_this, dtype=np.float64)
    pdf_other = np.asarray(pdf_other, dtype=np.float64)
    total = pdf_this + pdf_other
    return np.where(total > 0, pdf_this / np.where(total > 0, total, 1.0), 0.0)


def _normalize(v, axis=-1):
    return v / np.maximum(np.linalg.norm(v, axis=axis, keepdims=True), 1e-30)


@dataclass
class _GradAccum:
    d_albedo: np.ndarray
    d_roughness: np.ndarray
    d_env: np.ndarray
    alb_weight: np.ndarray  # per-hit-pixel RGB weights, scattered once at the end
    rough_weight: np.ndarray


def _render_impl(scene: Scene, camera, config: RenderConfig,
                 shading: Scene | None = None, loss_grads: dict | None = None):
    """Forward render and, optionally, parameter gradients.

    `shading` supplies the differentiated/perturbed material and
    environment values; sampling decisions and pdfs always come from
    `scene`. `loss_grads` maps buffer names (rgb, diffuse, specular,
    albedo) to (H, W, 3) arrays of per-pixel loss derivatives.
    """
    if shading is None:
        shading = scene
    same = shading is scene
    mesh = scene.mesh
    h, w = camera.height, camera.width
    npix = h * w

    buffers = {name: np.zeros((npix, 3)) for name in ("rgb", "diffuse", "specular", "albedo", "normal")}
    mask = np.zeros((npix, 1))

    origins, dirs = camera.primary_rays()
    t_hit, tri, bu, bv = scene.accel.intersect(origins, dirs)
    pix = np.nonzero(tri >= 0)[0]
    want_grads = loss_grads is not None
    grads = _GradAccum(
        d_albedo=np.zeros_like(shading.albedo.data),
        d_roughness=np.zeros_like(shading.roughness.data),
        d_env=np.zeros_like(shading.env.data),
        alb_weight=np.zeros((len(pix), 3)),
        rough_weight=np.zeros(len(pix)),
    ) if want_grads else None

    def finish(invalid, total):
        if total and invalid / total > config.max_invalid_fraction:
            raise RenderError(
                f"{invalid}/{total} samples discarded for degenerate pdfs "
                f"(> {config.max_invalid_fraction:.1e})")
        out = RenderBuffers(
            rgb=buffers["rgb"].reshape(h, w, 3),
            diffuse=buffers["diffuse"].reshape(h, w, 3),
            specular=buffers["specular"].reshape(h, w, 3),
            albedo=buffers["albedo"].reshape(h, w, 3),
            normal=buffers["normal"].reshape(h, w, 3),
            mask=mask.reshape(h, w, 1),
        )
        return out, grads

    if len(pix) == 0:
        return finish(0, 0)

    mask[pix] = 1.0
    faces = mesh.faces[tri[pix]]
    w1 = bu[pix][:, None]
    w2 = bv[pix][:, None]
    w0 = 1.0 - w1 - w2
    pos = origins[pix] + t_hit[pix][:, None] * dirs[pix]
    n_sh = _normalize(w0 * mesh.normals[faces[:, 0]] + w1 * mesh.normals[faces[:, 1]]
                      + w2 * mesh.normals[faces[:, 2]])
    if mesh.uvs is None:
        raise RenderError("mesh has no UVs; rendering requires a UV atlas for material lookups")
    uv = w0 * mesh.uvs[faces[:, 0]] + w1 * mesh.uvs[faces[:, 1]] + w2 * mesh.uvs[faces[:, 2]]
    n_geom = _normalize(np.cross(mesh.vertices[faces[:, 1]] - mesh.vertices[faces[:, 0]],
                                 mesh.vertices[faces[:, 2]] - mesh.vertices[faces[:, 0]]))
    wo = -dirs[pix]
    # two-sided shading: orient both normals toward the viewer
    side = np.where(np.sum(n_geom * wo, axis=1) >= 0.0, 1.0, -1.0)[:, None]
    n_geom = n_geom * side
    n_sh = n_sh * side
    backfacing = np.sum(n_sh * wo, axis=1) <= 1e-6
    n_sh[backfacing] = n_geom[backfacing]

    kd = sample_texture(shading.albedo, uv)
    rho = sample_texture(shading.roughness, uv)[:, 0]
    kd_det = kd if same else sample_texture(scene.albedo, uv)
    rho_det = rho if same else sample_texture(scene.roughness, uv)[:, 0]

    buffers["albedo"][pix] = kd
    buffers["normal"][pix] = n_sh

    nhit = len(pix)
    if config.lobes == "diffuse":
        p_diff = np.ones(nhit)
    elif config.lobes == "specular":
        p_diff = np.zeros(nhit)
    else:
        p_diff = _brdf.diffuse_probability(kd_det)

    point_eval = _brdf.ShadingPoint(pos[:, None, :], n_sh[:, None, :], wo[:, None, :],
                                    kd[:, None, :], rho[:, None])
    point_samp = point_eval if same else _brdf.ShadingPoint(
        pos[:, None, :], n_sh[:, None, :], wo[:, None, :], kd_det[:, None, :], rho_det[:, None])
    p_diff_b = p_diff[:, None]

    shadow_org = pos + scene.shadow_eps * n_geom
    f_d = kd / np.pi
    if config.lobes == "diffuse":
        f_d_mc = f_d
    elif config.lobes == "specular":
        f_d_mc = np.zeros_like(f_d)
    else:
        f_d_mc = f_d

    if want_grads:
        g_rgb = loss_grads.get("rgb")
        g_diff = loss_grads.get("diffuse")
        g_spec = loss_grads.get("specular")
        g_alb = loss_grads.get("albedo")
        zero = np.zeros((nhit, 3))
        ga = (g_rgb.reshape(npix, 3)[pix] if g_rgb is not None else zero) + \
             (g_diff.reshape(npix, 3)[pix] if g_diff is not None else zero)
        gb = (g_rgb.reshape(npix, 3)[pix] if g_rgb is not None else zero) + \
             (g_spec.reshape(npix, 3)[pix] if g_spec is not None else zero)
        if g_alb is not None:
            grads.d_albedo += bilinear_scatter(shading.albedo.data.shape,
                                               texture_corners(shading.albedo, uv),
                                               g_alb.reshape(npix, 3)[pix])

    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed) & 0x7FFFFFFF, 0x52454E44]))
    acc_diff = np.zeros((nhit, 3))
    acc_spec = np.zeros((nhit, 3))
    invalid = 0
    total_samples = 0
    use_light = config.strategy in ("mis", "light")
    use_brdf = config.strategy in ("mis", "brdf")
    need_spec = config.lobes != "diffuse"

    rho_sampling = None if same else rho_det[:, None]
    is_mis = config.strategy == "mis"

    done = 0
    while done < config.spp:
        m = min(_SPP_CHUNK, config.spp - done)
        done += m

        passes = []
        if use_light:
            u1 = rng.random((nhit, m))
            u2 = rng.random((nhit, m))
            ld, pdf_l = scene.env.sample(u1, u2)
            passes.append((ld, pdf_l, True))
        if use_brdf:
            u1 = rng.random((nhit, m))
            u2 = rng.random((nhit, m))
            ul = rng.random((nhit, m))
            wi = _brdf.sample_brdf_dirs(point_samp, u1, u2, ul, p_diff_b)
            env_pdf = scene.env.pdf(wi) if is_mis else None
            passes.append((wi, env_pdf, False))

        for d, env_pdf, is_light in passes:
            total_samples += d.shape[0] * d.shape[1]
            cos_i = np.einsum("nk,nmk->nm", n_sh, d)
            if config.lobes == "diffuse":
                pdf_mix = np.maximum(cos_i, 0.0) / np.pi
                f_s = np.zeros_like(cos_i)
                df_s = None
            else:
                pdf_mix, f_s, df_s = _brdf.mixture_terms(
                    point_eval, d, p_diff_b, rho_sampling=rho_sampling,
                    need_drho=want_grads and need_spec)
            if is_light:
                pdf_this = env_pdf
                pdf_other = pdf_mix if is_mis else 0.0
            else:
                pdf_this = pdf_mix
                pdf_other = env_pdf if is_mis else 0.0
            denom = pdf_this + pdf_other
            pot = (cos_i > 0.0) & (pdf_this > 0.0)
            bad = pot & (denom <= _PDF_TINY)
            invalid += int(bad.sum())
            pot &= ~bad
            vis = np.zeros(d.shape[:2], dtype=bool)
            ridx, sidx = np.nonzero(pot)
            if len(ridx):
                occ = scene.accel.occluded(shadow_org[ridx], d[ridx, sidx])
                vis[ridx, sidx] = ~occ
            base = np.where(vis, cos_i / np.where(denom > 0, denom, 1.0), 0.0)

            corners = shading.env.lookup_corners(d)
            radiance = _bilinear_gather(shading.env.data, corners)

            lb = radiance * base[..., None]
            acc_diff += np.einsum("nmc,nc->nc", lb, f_d_mc)
            acc_spec += (lb * f_s[..., None]).sum(axis=1)

            if want_grads:
                # diffuse numerator is linear in k_d; specular in rho via df_s
                if config.lobes != "specular":
                    grads.alb_weight += ga / np.pi * lb.sum(axis=1)
                if df_s is not None:
                    grads.rough_weight += np.einsum("nc,nmc,nm->n", gb, lb, df_s)
                env_vals = (ga * f_d_mc)[:, None, :] * base[..., None] + \
                    gb[:, None, :] * (f_s * base)[..., None]
                flat_env = grads.d_env.reshape(-1, 3)
                ew = shading.env.width
                for ry, cx, wt in corners:
                    np.add.at(flat_env, (ry * ew + cx).ravel(),
                              (env_vals * wt[..., None]).reshape(-1, 3))

    spp = float(config.spp)
    buffers["diffuse"][pix] = acc_diff / spp
    buffers["specular"][pix] = acc_spec / spp
    buffers["rgb"][pix] = (acc_diff + acc_spec) / spp

    if want_grads:
        grads.d_env /= spp
        grads.d_albedo += bilinear_scatter(shading.albedo.data.shape,
                                           texture_corners(shading.albedo, uv),
                                           grads.alb_weight / spp)
        grads.d_roughness += bilinear_scatter(shading.roughness.data.shape,
                                              texture_corners(shading.roughness, uv),
                                              (grads.rough_weight / spp)[:, None])

    return finish(invalid, total_samples)


def render(scene: Scene, camera, config: RenderConfig) -> RenderBuffers:
    """Render all AOV buffers for one camera; deterministic given the seed."""
    buffers, _ = _render_impl(scene, camera, config)
    return buffers


def relight(scene: Scene, new_env, camera, config: RenderConfig) -> RenderBuffers:
    """Render with the environment map swapped out (geometry reuse included)."""
    swapped = replace(scene, env=new_env)
    swapped._accel = scene._accel or scene.accel
    return render(swapped, camera, config)
