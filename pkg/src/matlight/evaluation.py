"""Image metrics and the decomposition evaluation protocol.

PSNR uses peak 1.0 on display-referred [0, 1] images (HDR buffers are
clamped before comparison). SSIM follows the standard 11x11 Gaussian
window (sigma 1.5) with the usual stabilizers; RGB inputs are averaged
to a single channel first. Predictions are brightness-aligned to ground
truth with one scalar across all channels, never per channel, so tint
errors stay visible in the scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PSNR_CAP = 99.0
_SSIM_SIGMA = 1.5
_SSIM_WIN = 11
_K1, _K2 = 0.01, 0.03


def _masked(a: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if mask is None:
        return a.reshape(-1)
    sel = np.broadcast_to(np.asarray(mask).reshape(a.shape[:2] + (1,)) > 0.5, a.shape)
    return a[sel]


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None,
         peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) over masked pixels, capped at 99 dB."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    av = _masked(a, mask)
    bv = _masked(b, mask)
    mse = float(np.mean((av - bv) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(float(10.0 * np.log10(peak ** 2 / mse)), PSNR_CAP)


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=2)
    return img


def _gaussian_filter2d(img: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    out = img
    for axis in (0, 1):
        moved = np.moveaxis(out, axis, 0)
        padded = np.zeros((moved.shape[0] + 2 * radius,) + moved.shape[1:])
        padded[radius:radius + moved.shape[0]] = moved
        win = np.lib.stride_tricks.sliding_window_view(padded, len(k), axis=0)
        out = np.moveaxis(win @ k, 0, axis)
    return out


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None,
         data_range: float = 1.0) -> float:
    """Mean local SSIM over masked windows.

    Border pixels whose window leaves the image are excluded, matching
    the usual cropped evaluation.
    """
    x = _to_gray(a)
    y = _to_gray(b)
    if x.shape != y.shape:
        raise ValueError("ssim inputs must share a shape")
    pad = (_SSIM_WIN - 1) // 2
    if min(x.shape[:2]) < _SSIM_WIN:
        raise ValueError(f"image smaller than the {_SSIM_WIN}x{_SSIM_WIN} ssim window")
    mu_x = _gaussian_filter2d(x, _SSIM_SIGMA, pad)
    mu_y = _gaussian_filter2d(y, _SSIM_SIGMA, pad)
    sxx = _gaussian_filter2d(x * x, _SSIM_SIGMA, pad) - mu_x ** 2
    syy = _gaussian_filter2d(y * y, _SSIM_SIGMA, pad) - mu_y ** 2
    sxy = _gaussian_filter2d(x * y, _SSIM_SIGMA, pad) - mu_x * mu_y
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    smap = num / den
    smap = smap[pad:-pad, pad:-pad]
    if mask is None:
        return float(smap.mean())
    msel = np.asarray(mask).reshape(x.shape) > 0.5
    msel = msel[pad:-pad, pad:-pad]
    if not msel.any():
        raise ValueError("no masked pixels inside the ssim interior")
    return float(smap[msel].mean())


def align_mean_rgb(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None):
    """Scale pred by one scalar so its masked mean matches gt's.

    A single scalar across channels: per-channel alignment would also
    cancel tint errors (light color baked into albedo), which the
    evaluation is supposed to expose. Returns (aligned, scale, flagged)
    where flagged means pred had zero mean and was left unscaled.
    """
    pv = _masked(pred, mask)
    gv = _masked(gt, mask)
    mp = float(pv.mean())
    if mp == 0.0:
        return np.asarray(pred, dtype=np.float64).copy(), 1.0, True
    s = float(gv.mean()) / mp
    return np.asarray(pred, dtype=np.float64) * s, s, False


def _clamp01(img: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)


@dataclass
class MetricReport:
    per_view: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    alignment: str = "mean-rgb-single-scalar"

    def to_json(self) -> str:
        return json.dumps({"alignment": self.alignment, "aggregates": self.aggregates,
                           "per_view": self.per_view}, indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def format_table(self) -> str:
        lines = [f"alignment mode: {self.alignment}"]
        if self.per_view:
            keys = [k for k in self.per_view[0] if k != "view"]
            header = f"{'view':>6s} " + " ".join(f"{k:>18s}" for k in keys)
            lines.append(header)
            for row in self.per_view:
                lines.append(f"{row['view']:>6d} " +
                             " ".join(f"{row[k]:18.4f}" for k in keys))
        lines.append("aggregates:")
        for k in sorted(self.aggregates):
            lines.append(f"  {k:28s} {self.aggregates[k]:.6f}")
        return "\n".join(lines)


def evaluate_decomposition(state, bundle, spp: int = 64, seed: int = 7) -> MetricReport:
    """Score a recovered decomposition against a synthetic GT bundle.

    Reports raw and mean-RGB-aligned albedo PSNR/SSIM on held-out
    views, view-synthesis PSNR under the training light, relighting
    PSNR under the novel light (using the GT novel environment with the
    recovered materials), and roughness MSE over the UV footprint.
    """
    from .renderer import RenderConfig, relight, render
    from .textures import uv_footprint

    scene = state.scene_with(bundle.scene)
    report = MetricReport()
    config = RenderConfig(spp=spp, seed=seed)

    pred_albedo, gt_albedo, masks = [], [], []
    for i, cam in enumerate(bundle.test_cameras):
        gt = bundle.test_buffers[i]
        novel_gt = bundle.novel_buffers[i]
        buffers = render(scene, cam, config)
        relit = relight(scene, bundle.novel_env, cam, config)
        mask = gt.mask
        row = {
            "view": i,
            "albedo_psnr_raw": psnr(_clamp01(buffers.albedo), _clamp01(gt.albedo), mask),
            "view_synthesis_psnr": psnr(_clamp01(buffers.rgb), _clamp01(gt.rgb), mask),
            "relighting_psnr": psnr(_clamp01(relit.rgb), _clamp01(novel_gt.rgb), mask),
        }
        report.per_view.append(row)
        pred_albedo.append(buffers.albedo)
        gt_albedo.append(gt.albedo)
        masks.append(mask)

    pred_stack = np.concatenate([p.reshape(-1, 3) for p in pred_albedo])
    gt_stack = np.concatenate([g.reshape(-1, 3) for g in gt_albedo])
    mask_stack = np.concatenate([np.broadcast_to(m > 0.5, p.shape)
                                 for m, p in zip(masks, pred_albedo)]).reshape(-1, 3)
    sel = mask_stack[:, 0]
    scale = 1.0
    if pred_stack[sel].mean() > 0:
        scale = float(gt_stack[sel].mean() / pred_stack[sel].mean())

    aligned_psnrs, aligned_ssims, raw_ssims = [], [], []
    for p, g, m in zip(pred_albedo, gt_albedo, masks):
        aligned_psnrs.append(psnr(_clamp01(p * scale), _clamp01(g), m))
        aligned_ssims.append(ssim(_clamp01(p * scale), _clamp01(g), m))
        raw_ssims.append(ssim(_clamp01(p), _clamp01(g), m))
    for row, ap, asm, rs in zip(report.per_view, aligned_psnrs, aligned_ssims, raw_ssims):
        row["albedo_psnr_aligned"] = ap
        row["albedo_ssim_aligned"] = asm
        row["albedo_ssim_raw"] = rs

    footprint = uv_footprint(bundle.scene.mesh, state.roughness.width, state.roughness.height,
                             dilate=0)
    gt_rough = bundle.gt_roughness.data
    rough_mse = float(np.mean((state.roughness.data[footprint] - gt_rough[footprint]) ** 2))

    def agg(key):
        return float(np.mean([r[key] for r in report.per_view]))

    report.aggregates = {
        "albedo_psnr_raw": agg("albedo_psnr_raw"),
        "albedo_psnr_aligned": agg("albedo_psnr_aligned"),
        "albedo_ssim_raw": agg("albedo_ssim_raw"),
        "albedo_ssim_aligned": agg("albedo_ssim_aligned"),
        "view_synthesis_psnr": agg("view_synthesis_psnr"),
        "relighting_psnr": agg("relighting_psnr"),
        "roughness_mse": rough_mse,
        "albedo_align_scale": scale,
    }
    return report
