"""Analytic parameter gradients of the Monte-Carlo render, plus an
independent finite-difference verification harness.

The gradient differentiates the fixed-sample estimator: sample
directions, lobe probabilities, and pdfs are frozen at the scene's
current parameters, and only the shaded quantities (radiance fetch,
BRDF numerator, albedo AOV) are differentiated. With geometry fixed,
visibility does not depend on any optimized parameter, so no silhouette
terms exist. The estimator is exactly linear in albedo texels and
environment pixels; roughness enters through closed-form derivatives of
the GGX D and Smith G factors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .renderer import RenderBuffers, RenderConfig, _render_impl
from .scene import Scene


@dataclass
class ParamGradients:
    d_albedo: np.ndarray  # matches albedo texture shape
    d_roughness: np.ndarray  # matches roughness texture shape
    d_env: np.ndarray  # matches environment map shape

    def validate(self) -> None:
        for name, arr in (("albedo", self.d_albedo), ("roughness", self.d_roughness),
                          ("env", self.d_env)):
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite gradient in d_{name}")

    def scaled(self, s: float) -> "ParamGradients":
        return ParamGradients(self.d_albedo * s, self.d_roughness * s, self.d_env * s)

    def add_(self, other: "ParamGradients", s: float = 1.0) -> "ParamGradients":
        self.d_albedo += s * other.d_albedo
        self.d_roughness += s * other.d_roughness
        self.d_env += s * other.d_env
        return self


def render_with_grads(scene: Scene, camera, config: RenderConfig,
                      pixel_loss_grads: dict, shading: Scene | None = None
                      ) -> tuple[RenderBuffers, ParamGradients]:
    """Render and accumulate dLoss/dparams for the given per-pixel loss grads.

    `pixel_loss_grads` maps buffer names among {rgb, diffuse, specular,
    albedo} to (H, W, 3) arrays of dLoss/dbuffer; missing keys mean the
    loss does not read that buffer.
    """
    buffers, acc = _render_impl(scene, camera, config, shading=shading,
                                loss_grads=pixel_loss_grads)
    grads = ParamGradients(acc.d_albedo, acc.d_roughness, acc.d_env)
    grads.validate()
    return buffers, grads


# -- finite-difference harness ------------------------------------------------

_PARAM_KINDS = ("albedo", "roughness", "env")


@dataclass
class GradCheckRow:
    kind: str
    index: tuple[int, int, int]
    analytic: float
    numeric: float
    rel_err: float
    absolute_mode: bool  # both gradients ~0; rel_err holds the absolute error
    one_sided: bool  # parameter at a clamp boundary


@dataclass
class GradCheckReport:
    rows: list[GradCheckRow]
    h: float

    def max_rel_err(self, kind: str | None = None) -> float:
        rows = [r for r in self.rows if kind is None or r.kind == kind]
        return max((r.rel_err for r in rows), default=0.0)

    def format_table(self) -> str:
        lines = [f"{'kind':10s} {'index':>14s} {'analytic':>14s} {'numeric':>14s} "
                 f"{'rel_err':>10s} flags"]
        for r in self.rows:
            flags = []
            if r.one_sided:
                flags.append("one-sided")
            if r.absolute_mode:
                flags.append("abs-err")
            lines.append(f"{r.kind:10s} {str(r.index):>14s} {r.analytic:14.6e} "
                         f"{r.numeric:14.6e} {r.rel_err:10.3e} {','.join(flags)}")
        return "\n".join(lines)


def _harness_weights(buffers: RenderBuffers, seed: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57454947]))
    return {name: rng.uniform(0.25, 1.0, size=getattr(buffers, name).shape)
            for name in ("rgb", "specular", "albedo")}


def _harness_loss(buffers: RenderBuffers, weights: dict) -> float:
    # quadratic in the buffers, so central differences are exact for
    # parameters the estimator is linear in
    return float(sum(0.5 * (weights[k] * getattr(buffers, k) ** 2).sum() for k in weights))


def _param_array(scene: Scene, kind: str) -> np.ndarray:
    if kind == "albedo":
        return scene.albedo.data
    if kind == "roughness":
        return scene.roughness.data
    if kind == "env":
        return scene.env.data
    raise ValueError(f"unknown parameter kind {kind!r}")


def _clamp_range(scene: Scene, kind: str) -> tuple[float, float]:
    if kind == "albedo":
        return scene.albedo.lo, scene.albedo.hi
    if kind == "roughness":
        return scene.roughness.lo, scene.roughness.hi
    return 0.0, np.inf


def _shading_clone(scene: Scene) -> Scene:
    clone = replace(scene, albedo=scene.albedo.copy(), roughness=scene.roughness.copy(),
                    env=scene.env.copy())
    clone._accel = scene.accel
    return clone


def finite_diff_check(scene: Scene, camera, config: RenderConfig,
                      param_selector: list[tuple[str, int, int, int]],
                      h: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients against seed-matched central differences.

    `param_selector` lists (kind, row, col, channel) entries with kind in
    {albedo, roughness, env}. Both finite-difference renders reuse the
    unperturbed scene for all sampling decisions, so they evaluate the
    same deterministic function the analytic pass differentiates.
    Parameters at a clamp boundary fall back to a one-sided difference
    and are flagged. Zero-gradient parameters are compared by absolute
    error (threshold 1e-6) and flagged.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base_buffers, _ = _render_impl(scene, camera, config)
    weights = _harness_weights(base_buffers, int(config.seed))
    loss_grads = {k: weights[k] * getattr(base_buffers, k) for k in weights}
    _, grads = render_with_grads(scene, camera, config, loss_grads)
    by_kind = {"albedo": grads.d_albedo, "roughness": grads.d_roughness, "env": grads.d_env}

    def loss_at(kind, idx, value) -> float:
        shading = _shading_clone(scene)
        _param_array(shading, kind)[idx] = value
        buffers, _ = _render_impl(scene, camera, config, shading=shading)
        return _harness_loss(buffers, weights)

    rows = []
    for kind, iy, ix, ch in param_selector:
        if kind not in _PARAM_KINDS:
            raise ValueError(f"unknown parameter kind {kind!r}")
        idx = (iy, ix, ch)
        p0 = float(_param_array(scene, kind)[idx])
        lo, hi = _clamp_range(scene, kind)
        one_sided = False
        if p0 - h < lo:
            f0 = loss_at(kind, idx, p0)
            f1 = loss_at(kind, idx, p0 + h)
            numeric = (f1 - f0) / h
            one_sided = True
        elif p0 + h > hi:
            f0 = loss_at(kind, idx, p0 - h)
            f1 = loss_at(kind, idx, p0)
            numeric = (f1 - f0) / h
            one_sided = True
        else:
            f_minus = loss_at(kind, idx, p0 - h)
            f_plus = loss_at(kind, idx, p0 + h)
            numeric = (f_plus - f_minus) / (2 * h)
        analytic = float(by_kind[kind][idx])
        denom = max(abs(analytic), abs(numeric))
        absolute_mode = denom < 1e-9
        rel = abs(analytic - numeric) if absolute_mode else abs(analytic - numeric) / denom
        rows.append(GradCheckRow(kind, idx, analytic, numeric, rel, absolute_mode, one_sided))
    return GradCheckReport(rows, h)
