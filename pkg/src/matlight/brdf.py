"""Simplified Disney-style BRDF split into diffuse and specular lobes.

f(wo, wi) = k_d / pi + D * G * F / (4 (n.wo)(n.wi))

with GGX normal distribution (alpha = roughness^2), height-correlated
Smith geometry attenuation, and scalar Schlick Fresnel at F0 = 0.04
(dielectric). Everything is vectorized over shading-point batches and
stateless; callers supply the random numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

F0 = 0.04
# diffuse-lobe selection probability: lum / (lum + 0.08), kept away from
# 0 and 1 so both lobes always carry sampling mass for MIS
LOBE_BIAS = 0.08
P_DIFFUSE_MIN = 0.1
P_DIFFUSE_MAX = 0.9

_EPS = 1e-9


@dataclass
class ShadingPoint:
    """Per-point shading inputs; all arrays share the leading batch shape."""

    position: np.ndarray  # (N, 3)
    normal: np.ndarray  # (N, 3) unit shading normal
    wo: np.ndarray  # (N, 3) unit, toward viewer, dot(n, wo) > 0
    albedo: np.ndarray  # (N, 3) in [0, 1]
    roughness: np.ndarray  # (N,) in [0.01, 1]


def luminance(rgb: np.ndarray) -> np.ndarray:
    return 0.2126 * rgb[..., 0] + 0.7152 * rgb[..., 1] + 0.0722 * rgb[..., 2]


def diffuse_probability(albedo: np.ndarray) -> np.ndarray:
    lum = luminance(np.asarray(albedo, dtype=np.float64))
    return np.clip(lum / (lum + LOBE_BIAS), P_DIFFUSE_MIN, P_DIFFUSE_MAX)


def build_onb(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Branchless orthonormal basis (tangent, bitangent) around unit n."""
    n = np.asarray(n, dtype=np.float64)
    s = np.where(n[..., 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (s + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t = np.stack([1.0 + s * n[..., 0] ** 2 * a, s * b, -s * n[..., 0]], axis=-1)
    bt = np.stack([b, s + n[..., 1] ** 2 * a, -n[..., 1]], axis=-1)
    return t, bt


def _dot(a, b):
    return np.einsum("...k,...k->...", a, b)


def ggx_d(cos_h: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    c2 = np.clip(cos_h, 0.0, 1.0) ** 2
    denom = c2 * (alpha ** 2 - 1.0) + 1.0
    return alpha ** 2 / (np.pi * denom ** 2)


def ggx_d_dalpha(cos_h: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    c2 = np.clip(cos_h, 0.0, 1.0) ** 2
    denom = c2 * (alpha ** 2 - 1.0) + 1.0
    return 2.0 * alpha * (1.0 - c2 * (1.0 + alpha ** 2)) / (np.pi * denom ** 3)


def _lambda_smith(cos_t: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    c = np.clip(np.abs(cos_t), _EPS, 1.0)
    k = (1.0 - c * c) / (c * c)
    return 0.5 * (-1.0 + np.sqrt(1.0 + alpha ** 2 * k))


def _lambda_smith_dalpha(cos_t: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    c = np.clip(np.abs(cos_t), _EPS, 1.0)
    k = (1.0 - c * c) / (c * c)
    return 0.5 * alpha * k / np.sqrt(1.0 + alpha ** 2 * k)


def smith_g(cos_o: np.ndarray, cos_i: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Height-correlated Smith masking-shadowing."""
    return 1.0 / (1.0 + _lambda_smith(cos_o, alpha) + _lambda_smith(cos_i, alpha))


def schlick_fresnel(cos_d: np.ndarray) -> np.ndarray:
    m = np.clip(1.0 - np.clip(cos_d, 0.0, 1.0), 0.0, 1.0)
    return F0 + (1.0 - F0) * m ** 5


def eval_diffuse(point: ShadingPoint) -> np.ndarray:
    """Diffuse lobe: k_d / pi, independent of directions and roughness."""
    return np.asarray(point.albedo, dtype=np.float64) / np.pi


def _specular_terms(point: ShadingPoint, wi: np.ndarray):
    n = point.normal
    wo = point.wo
    cos_i = _dot(n, wi)
    cos_o = np.clip(_dot(n, wo), _EPS, 1.0)
    h = wo + wi
    h_len = np.sqrt(_dot(h, h))
    h = h / np.maximum(h_len, _EPS)[..., None]
    cos_h = np.clip(_dot(n, h), 0.0, 1.0)
    cos_d = np.clip(_dot(h, wo), 0.0, 1.0)
    alpha = np.asarray(point.roughness, dtype=np.float64) ** 2
    return cos_i, cos_o, cos_h, cos_d, alpha, h_len


def eval_specular(point: ShadingPoint, wi: np.ndarray) -> np.ndarray:
    """Scalar (channel-independent) specular lobe value; 0 below horizon."""
    cos_i, cos_o, cos_h, cos_d, alpha, h_len = _specular_terms(point, wi)
    d = ggx_d(cos_h, alpha)
    g = smith_g(cos_o, cos_i, alpha)
    f = schlick_fresnel(cos_d)
    val = d * g * f / (4.0 * cos_o * np.clip(cos_i, _EPS, 1.0))
    return np.where((cos_i > 0) & (h_len > _EPS), val, 0.0)


def eval_specular_drho(point: ShadingPoint, wi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Specular value and its derivative in roughness (closed form).

    Only D and G depend on roughness; alpha = rho^2 chains a 2 rho factor.
    """
    cos_i, cos_o, cos_h, cos_d, alpha, h_len = _specular_terms(point, wi)
    d = ggx_d(cos_h, alpha)
    dd = ggx_d_dalpha(cos_h, alpha)
    lam_o = _lambda_smith(cos_o, alpha)
    lam_i = _lambda_smith(cos_i, alpha)
    g = 1.0 / (1.0 + lam_o + lam_i)
    dg = -g * g * (_lambda_smith_dalpha(cos_o, alpha) + _lambda_smith_dalpha(cos_i, alpha))
    f = schlick_fresnel(cos_d)
    scale = f / (4.0 * cos_o * np.clip(cos_i, _EPS, 1.0))
    valid = (cos_i > 0) & (h_len > _EPS)
    rho = np.asarray(point.roughness, dtype=np.float64)
    val = np.where(valid, d * g * scale, 0.0)
    dval = np.where(valid, (dd * g + d * dg) * scale * 2.0 * rho, 0.0)
    return val, dval


def _pdf_cosine(point: ShadingPoint, wi: np.ndarray) -> np.ndarray:
    return np.maximum(_dot(point.normal, wi), 0.0) / np.pi


def _pdf_ggx(point: ShadingPoint, wi: np.ndarray) -> np.ndarray:
    cos_i, cos_o, cos_h, cos_d, alpha, h_len = _specular_terms(point, wi)
    pdf_h = ggx_d(cos_h, alpha) * cos_h
    pdf = pdf_h / np.maximum(4.0 * cos_d, _EPS)
    return np.where((cos_i > 0) & (h_len > _EPS) & (cos_d > _EPS), pdf, 0.0)


def pdf_brdf(point: ShadingPoint, wi: np.ndarray, p_diffuse: np.ndarray | None = None) -> np.ndarray:
    """Solid-angle pdf of sample_brdf's mixture; 0 below the hemisphere."""
    if p_diffuse is None:
        p_diffuse = diffuse_probability(point.albedo)
    below = _dot(point.normal, wi) <= 0.0
    pdf = p_diffuse * _pdf_cosine(point, wi) + (1.0 - p_diffuse) * _pdf_ggx(point, wi)
    return np.where(below, 0.0, pdf)


def sample_cosine_local(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    return np.stack([r * np.cos(phi), r * np.sin(phi),
                     np.sqrt(np.maximum(0.0, 1.0 - u1))], axis=-1)


def sample_ggx_half_local(u1: np.ndarray, u2: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Half vector from the D * cos(theta_h) distribution."""
    cos2 = (1.0 - u1) / np.maximum(1.0 - u1 + alpha ** 2 * u1, 1e-30)
    cos_t = np.sqrt(np.clip(cos2, 0.0, 1.0))
    sin_t = np.sqrt(np.clip(1.0 - cos2, 0.0, 1.0))
    phi = 2.0 * np.pi * u2
    return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1)


def mixture_terms(point: ShadingPoint, wi: np.ndarray, p_diffuse: np.ndarray,
                  rho_sampling: np.ndarray | None = None, need_drho: bool = False):
    """Fused per-direction terms sharing one geometry setup.

    Returns (pdf_mix, f_s, df_s_or_None). `rho_sampling` lets the pdf
    use a different (detached) roughness than the evaluated lobe; pass
    None when they coincide so the D term is computed once.
    """
    cos_i, cos_o, cos_h, cos_d, alpha, h_len = _specular_terms(point, wi)
    ok = (cos_i > 0) & (h_len > _EPS)
    d = ggx_d(cos_h, alpha)
    lam_o = _lambda_smith(cos_o, alpha)
    lam_i = _lambda_smith(cos_i, alpha)
    g = 1.0 / (1.0 + lam_o + lam_i)
    f = schlick_fresnel(cos_d)
    scale = f / (4.0 * cos_o * np.clip(cos_i, _EPS, 1.0))
    f_s = np.where(ok, d * g * scale, 0.0)
    df_s = None
    if need_drho:
        dd = ggx_d_dalpha(cos_h, alpha)
        dg = -g * g * (_lambda_smith_dalpha(cos_o, alpha) + _lambda_smith_dalpha(cos_i, alpha))
        rho = np.asarray(point.roughness, dtype=np.float64)
        df_s = np.where(ok, (dd * g + d * dg) * scale * 2.0 * rho, 0.0)

    if rho_sampling is None:
        d_pdf = d
    else:
        d_pdf = ggx_d(cos_h, np.asarray(rho_sampling, dtype=np.float64) ** 2)
    pdf_spec = np.where(ok & (cos_d > _EPS), d_pdf * cos_h / np.maximum(4.0 * cos_d, _EPS), 0.0)
    pdf = p_diffuse * np.maximum(cos_i, 0.0) / np.pi + (1.0 - p_diffuse) * pdf_spec
    pdf = np.where(cos_i > 0, pdf, 0.0)
    return pdf, f_s, df_s


def sample_brdf_dirs(point: ShadingPoint, u1, u2, u_lobe, p_diffuse: np.ndarray):
    """Directions of the two-lobe mixture sampler, without pdf or values."""
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    n = point.normal
    t, b = build_onb(n)
    pick_diffuse = np.asarray(u_lobe, dtype=np.float64) < p_diffuse
    local = sample_cosine_local(u1, u2)
    wi_diff = local[..., 0:1] * t + local[..., 1:2] * b + local[..., 2:3] * n
    alpha = np.asarray(point.roughness, dtype=np.float64) ** 2
    h_local = sample_ggx_half_local(u1, u2, alpha)
    h = h_local[..., 0:1] * t + h_local[..., 1:2] * b + h_local[..., 2:3] * n
    wi_spec = 2.0 * _dot(point.wo, h)[..., None] * h - point.wo
    wi = np.where(pick_diffuse[..., None], wi_diff, wi_spec)
    return wi / np.maximum(np.sqrt(_dot(wi, wi))[..., None], _EPS)


def sample_brdf(point: ShadingPoint, u1, u2, u_lobe, p_diffuse: np.ndarray | None = None):
    """Draw incident directions from the two-lobe mixture.

    Returns (wi, pdf, f_diffuse, f_specular). Samples that land below
    the hemisphere report pdf 0 and must be rejected by the caller.
    """
    if p_diffuse is None:
        p_diffuse = diffuse_probability(point.albedo)
    wi = sample_brdf_dirs(point, u1, u2, u_lobe, p_diffuse)
    pdf, f_s, _ = mixture_terms(point, wi, p_diffuse)
    f_d = eval_diffuse(point)
    return wi, pdf, np.broadcast_to(f_d, wi.shape), f_s
