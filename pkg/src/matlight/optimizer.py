"""Losses and the two-stage coarse-to-fine inverse-rendering loop.

Stage 1 fits albedo, roughness, and the environment map to the observed
images under diffusion-prior sample supervision (prior samples drawn
once per view and cached). Stage 2 re-generates the per-view samples
with guided chains steered by the current albedo / specular estimates
and keeps optimizing against those multi-view-consistent targets.

All data norms are per-pixel L1 averaged over masked pixel-channels.
The albedo prior term aligns the rendered albedo to each sample's scale
and mean first (scale-shift-invariant comparison), since independent
prior draws disagree in intensity across views.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .gradients import ParamGradients, render_with_grads
from .imgio import read_pfm, write_pfm
from .priors import ALBEDO, SPECULAR, MaterialPrior
from .renderer import RenderBuffers, RenderConfig, render
from .scene import Camera, Scene
from .textures import EnvironmentMap, MaterialTexture, luminance, uv_footprint
from .tensorio import load_tensors, save_tensors


class DivergenceError(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class LossWeights:
    image: float = 1.0
    albedo_prior: float = 0.5
    specular_prior: float = 0.5
    smoothness: float = 0.01

    def validate(self):
        if min(self.image, self.albedo_prior, self.specular_prior, self.smoothness) < 0:
            raise ValueError("loss weights must be nonnegative")


class SSIResult(NamedTuple):
    aligned: np.ndarray
    scale: float
    offset: float
    degenerate: bool


def ssi_align(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> SSIResult:
    """Least-squares align a to b's scale and mean over masked pixels.

    One scalar (s, o) pair per image across all channels. If a is
    constant within the mask the fit is undefined; a is returned
    unchanged with the degenerate flag set.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask is None:
        sel = np.ones(a.shape, dtype=bool)
    else:
        sel = np.broadcast_to(np.asarray(mask) > 0.5, a.shape)
    av = a[sel]
    bv = b[sel]
    ma, mb = av.mean(), bv.mean()
    va = np.mean(av * av) - ma * ma
    if va <= 1e-14:
        return SSIResult(a.copy(), 1.0, 0.0, True)
    cov = np.mean(av * bv) - ma * mb
    s = cov / va
    o = mb - s * ma
    return SSIResult(s * a + o, float(s), float(o), False)


def _l1_term(pred: np.ndarray, target: np.ndarray, sel: np.ndarray):
    """Mean |pred - target| over selected entries and its d/dpred map."""
    n = int(sel.sum())
    diff = np.where(sel, pred - target, 0.0)
    loss = np.abs(diff).sum() / n
    grad = np.sign(diff) / n
    return loss, grad


def _ssi_l1_term(a: np.ndarray, b: np.ndarray, sel: np.ndarray):
    """Mean |SSI(a, b) - b| over selected entries, with the exact
    gradient through the least-squares scale/offset fit."""
    av = a[sel]
    bv = b[sel]
    n = av.size
    ma, mb = av.mean(), bv.mean()
    va = np.mean(av * av) - ma * ma
    grad = np.zeros_like(a)
    if va <= 1e-14:  # degenerate: constants, compare directly
        r = av - bv
        grad[sel] = np.sign(r) / n
        return float(np.abs(r).sum() / n), grad
    cov = np.mean(av * bv) - ma * mb
    s = cov / va
    o = mb - s * ma
    r = s * av + o - bv
    sgn = np.sign(r)
    s0 = sgn.sum()
    s1 = (sgn * (av - ma)).sum()
    ds_dai = ((bv - mb) - 2.0 * s * (av - ma)) / (n * va)
    grad_vals = (s * sgn + ds_dai * s1 - (s / n) * s0) / n
    grad[sel] = grad_vals
    return float(np.abs(r).sum() / n), grad


def smoothness_loss(texture: MaterialTexture, footprint: np.ndarray | None = None):
    """Mean L1 of horizontal + vertical neighbor differences.

    Only pairs with both texels inside the footprint count. Returns the
    scalar and its gradient w.r.t. the texels.
    """
    data = texture.data
    h, w, c = data.shape
    if footprint is None:
        footprint = np.ones((h, w), dtype=bool)
    grad = np.zeros_like(data)
    total = 0.0
    npairs = 0
    for axis in (0, 1):
        if data.shape[axis] < 2:
            continue
        if axis == 0:
            d = data[1:] - data[:-1]
            pair = (footprint[1:] & footprint[:-1])[:, :, None]
        else:
            d = data[:, 1:] - data[:, :-1]
            pair = (footprint[:, 1:] & footprint[:, :-1])[:, :, None]
        d = np.where(pair, d, 0.0)
        total += np.abs(d).sum()
        npairs += int(pair.sum()) * c
        sgn = np.sign(d)
        if axis == 0:
            grad[1:] += sgn
            grad[:-1] -= sgn
        else:
            grad[:, 1:] += sgn
            grad[:, :-1] -= sgn
    if npairs == 0:
        return 0.0, grad
    return float(total / npairs), grad / npairs


@dataclass
class CoarseLossResult:
    total: float
    terms: dict[str, float]
    pixel_grads: dict[str, np.ndarray]


def loss_coarse(buffers: RenderBuffers, observed: np.ndarray,
                albedo_sample: np.ndarray | None, specular_sample: np.ndarray | None,
                weights: LossWeights, mask: np.ndarray,
                smooth_value: float = 0.0) -> CoarseLossResult:
    """Data terms of the coarse loss and their per-buffer gradients.

    The smoothness term acts on texels, not pixels; its precomputed
    value is folded into the total via `smooth_value` while its texel
    gradient is applied by the caller.
    """
    weights.validate()
    m = (np.asarray(buffers.mask) > 0.5) & (np.asarray(mask).reshape(buffers.mask.shape) > 0.5)
    sel = np.broadcast_to(m, buffers.rgb.shape)
    if not sel.any():
        raise ValueError("no masked pixels to compare")
    terms: dict[str, float] = {}
    pixel_grads: dict[str, np.ndarray] = {}

    l_img, g_img = _l1_term(buffers.rgb, np.asarray(observed, dtype=np.float64), sel)
    terms["image"] = l_img
    pixel_grads["rgb"] = weights.image * g_img

    if albedo_sample is not None and weights.albedo_prior > 0:
        l_alb, g_alb = _ssi_l1_term(buffers.albedo, np.asarray(albedo_sample, dtype=np.float64), sel)
        terms["albedo_prior"] = l_alb
        pixel_grads["albedo"] = weights.albedo_prior * g_alb
    else:
        terms["albedo_prior"] = 0.0

    if specular_sample is not None and weights.specular_prior > 0:
        l_spec, g_spec = _l1_term(buffers.specular, np.asarray(specular_sample, dtype=np.float64), sel)
        terms["specular_prior"] = l_spec
        pixel_grads["specular"] = weights.specular_prior * g_spec
    else:
        terms["specular_prior"] = 0.0

    terms["smoothness"] = smooth_value
    total = (weights.image * terms["image"]
             + weights.albedo_prior * terms["albedo_prior"]
             + weights.specular_prior * terms["specular_prior"]
             + weights.smoothness * smooth_value)
    return CoarseLossResult(float(total), terms, pixel_grads)


# -- Adam ---------------------------------------------------------------------

def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                step: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> None:
    """In-place bias-corrected adaptive-moment update."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class OptimConfig:
    stage1_iters: int = 2000
    stage2_iters: int = 1500
    spp: int = 16
    lr_texture: float = 1e-2
    lr_env: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    guidance_gamma: float = 2.0  # stage-2 sample guidance scale
    seed: int = 0


@dataclass
class ViewData:
    camera: Camera
    image: np.ndarray  # observed linear RGB (H, W, 3)
    mask: np.ndarray  # (H, W, 1)


@dataclass
class OptimState:
    albedo: MaterialTexture
    roughness: MaterialTexture
    env: EnvironmentMap
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0
    stage: str = "coarse"
    prior_samples: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def initialize(cls, scene: Scene, views: list[ViewData]) -> "OptimState":
        """Neutral start: 0.5 gray materials, uniform gray environment at
        the mean observed luminance."""
        albedo = MaterialTexture.constant(scene.albedo.height, scene.albedo.width, (0.5,) * 3)
        rough = MaterialTexture.constant(scene.roughness.height, scene.roughness.width,
                                         (0.5,), lo=0.01, hi=1.0)
        lum_sum, n = 0.0, 0
        for view in views:
            msel = np.asarray(view.mask).reshape(view.image.shape[:2]) > 0.5
            if msel.any():
                lum_sum += float(luminance(view.image[msel]).sum())
                n += int(msel.sum())
        mean_lum = lum_sum / max(n, 1)
        env = EnvironmentMap.constant(scene.env.height, scene.env.width, (mean_lum,) * 3)
        shapes = {"albedo": albedo.data, "roughness": rough.data, "env": env.data}
        return cls(albedo, rough, env,
                   m={k: np.zeros_like(a) for k, a in shapes.items()},
                   v={k: np.zeros_like(a) for k, a in shapes.items()})

    def scene_with(self, scene: Scene) -> Scene:
        out = replace(scene, albedo=self.albedo, roughness=self.roughness, env=self.env)
        out._accel = scene.accel
        return out

    def copy(self) -> "OptimState":
        return OptimState(self.albedo.copy(), self.roughness.copy(), self.env.copy(),
                          {k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()},
                          self.step_count, self.stage,
                          {k: {kk: vv.copy() for kk, vv in d.items()}
                           for k, d in self.prior_samples.items()})


def adam_step(state: OptimState, grads: ParamGradients, cfg: OptimConfig) -> OptimState:
    """One Adam update over all parameter grids, then clamps."""
    state.step_count += 1
    t = state.step_count
    adam_update(state.albedo.data, grads.d_albedo, state.m["albedo"], state.v["albedo"],
                t, cfg.lr_texture, cfg.beta1, cfg.beta2, cfg.adam_eps)
    adam_update(state.roughness.data, grads.d_roughness, state.m["roughness"], state.v["roughness"],
                t, cfg.lr_texture, cfg.beta1, cfg.beta2, cfg.adam_eps)
    adam_update(state.env.data, grads.d_env, state.m["env"], state.v["env"],
                t, cfg.lr_env, cfg.beta1, cfg.beta2, cfg.adam_eps)
    state.albedo.clamp()
    state.roughness.clamp()
    np.clip(state.env.data, 0.0, None, out=state.env.data)
    state.env.rebuild_cdf()
    return state


def _draw_prior_samples(state: OptimState, scene: Scene, views: list[ViewData],
                        prior: MaterialPrior | None, cfg: OptimConfig,
                        guided: bool, render_cfg: RenderConfig) -> None:
    if prior is None:
        state.prior_samples = {}
        return
    cur = state.scene_with(scene)
    for i, view in enumerate(views):
        guidance_albedo = guidance_spec = None
        gamma = 0.0
        if guided:
            buffers = render(cur, view.camera, render_cfg)
            guidance_albedo = buffers.albedo
            guidance_spec = buffers.specular
            gamma = cfg.guidance_gamma
        alb = prior.sample(ALBEDO, i, view.image, cfg.seed,
                           guidance_target=guidance_albedo, gamma=gamma)
        spec = prior.sample(SPECULAR, i, view.image, cfg.seed,
                            guidance_target=guidance_spec, gamma=gamma)
        state.prior_samples[i] = {ALBEDO: alb, SPECULAR: spec}


def _optimize_loop(state: OptimState, scene: Scene, views: list[ViewData],
                   cfg: OptimConfig, iters: int, footprint: np.ndarray,
                   history: list[dict], stage_tag: str) -> OptimState:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x4F505449]))
    order: list[int] = []
    cur = state.scene_with(scene)
    for it in range(iters):
        if not order:
            order = list(rng.permutation(len(views)))
        vi = int(order.pop())
        view = views[vi]
        render_cfg = RenderConfig(spp=cfg.spp, seed=int(rng.integers(1 << 31)))

        buffers = render(cur, view.camera, render_cfg)
        sm_total = 0.0
        sm_grads = {}
        if cfg.weights.smoothness > 0:
            sa, ga = smoothness_loss(state.albedo, footprint)
            sr, gr = smoothness_loss(state.roughness, footprint)
            sm_total = sa + sr
            sm_grads = {"albedo": ga, "roughness": gr}
        samples = state.prior_samples.get(vi, {})
        result = loss_coarse(buffers, view.image, samples.get(ALBEDO), samples.get(SPECULAR),
                             cfg.weights, view.mask, smooth_value=sm_total)
        if not np.isfinite(result.total):
            raise DivergenceError(f"non-finite loss at {stage_tag} iteration {it}", state)

        _, grads = render_with_grads(cur, view.camera, render_cfg, result.pixel_grads)
        if sm_grads:
            grads.d_albedo += cfg.weights.smoothness * sm_grads["albedo"]
            grads.d_roughness += cfg.weights.smoothness * sm_grads["roughness"]
        adam_step(state, grads, cfg)
        history.append({"stage": stage_tag, "iteration": it, "view": vi,
                        "total": result.total, **result.terms})
    return state


def stage1_optimize(scene: Scene, views: list[ViewData], prior: MaterialPrior | None,
                    cfg: OptimConfig, state: OptimState | None = None,
                    history: list[dict] | None = None) -> OptimState:
    """Coarse stage: unguided prior samples, drawn once per view and cached."""
    if history is None:
        history = []
    if state is None:
        state = OptimState.initialize(scene, views)
    render_cfg = RenderConfig(spp=cfg.spp, seed=cfg.seed)
    _draw_prior_samples(state, scene, views, prior, cfg, guided=False, render_cfg=render_cfg)
    footprint = uv_footprint(scene.mesh, state.albedo.width, state.albedo.height)
    state.history = history  # type: ignore[attr-defined]
    return _optimize_loop(state, scene, views, cfg, cfg.stage1_iters, footprint, history, "coarse")


def stage2_optimize(state: OptimState, scene: Scene, views: list[ViewData],
                    prior: MaterialPrior | None, cfg: OptimConfig,
                    history: list[dict] | None = None) -> OptimState:
    """Fine stage: re-generate prior samples with chains guided by the
    current albedo / specular estimates, then keep optimizing."""
    if state.stage != "coarse":
        raise ValueError("stage2_optimize requires a coarse-stage state")
    if history is None:
        history = getattr(state, "history", [])
    render_cfg = RenderConfig(spp=cfg.spp, seed=cfg.seed)
    _draw_prior_samples(state, scene, views, prior, cfg, guided=True, render_cfg=render_cfg)
    state.stage = "fine"
    footprint = uv_footprint(scene.mesh, state.albedo.width, state.albedo.height)
    return _optimize_loop(state, scene, views, cfg, cfg.stage2_iters, footprint, history, "fine")


# -- checkpoints ---------------------------------------------------------------

def save_state(state: OptimState, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pfm(state.albedo.data, out / "albedo.pfm")
    write_pfm(state.roughness.data, out / "roughness.pfm")
    write_pfm(state.env.data, out / "env.pfm")
    moments = {}
    for k in state.m:
        moments[f"m_{k}"] = state.m[k]
        moments[f"v_{k}"] = state.v[k]
    for vi, d in state.prior_samples.items():
        for kind, arr in d.items():
            moments[f"sample_{kind}_{vi}"] = arr
    save_tensors(out / "moments.mlt", moments)
    (out / "state.json").write_text(json.dumps(
        {"step_count": state.step_count, "stage": state.stage,
         "views": sorted(state.prior_samples)}, indent=1))


def load_state(out_dir) -> OptimState:
    out = Path(out_dir)
    meta = json.loads((out / "state.json").read_text())
    albedo = MaterialTexture.albedo(read_pfm(out / "albedo.pfm").astype(np.float64))
    rough = MaterialTexture.roughness_map(read_pfm(out / "roughness.pfm").astype(np.float64))
    env = EnvironmentMap(read_pfm(out / "env.pfm").astype(np.float64))
    tensors = load_tensors(out / "moments.mlt")
    m = {k[2:]: tensors[k].astype(np.float64) for k in tensors if k.startswith("m_")}
    v = {k[2:]: tensors[k].astype(np.float64) for k in tensors if k.startswith("v_")}
    samples: dict[int, dict[str, np.ndarray]] = {}
    for key, arr in tensors.items():
        if key.startswith("sample_"):
            _, kind, vi = key.split("_")
            samples.setdefault(int(vi), {})[kind] = arr.astype(np.float64)
    state = OptimState(albedo, rough, env, m, v, meta["step_count"], meta["stage"], samples)
    return state
