"""Per-view material priors: sampled albedo and specular-shading images.

A prior wraps score models behind a uniform sampling surface. Material
images in [0, 1] map affinely to the diffusion working space via
x = 2 m - 1. The oracle prior centers a closed-form Gaussian score
model on supplied per-view reference images, which makes end-to-end
optimization testable without a trained network; the toy prior wraps
learned conditional denoisers.
"""

from __future__ import annotations

import numpy as np

from .diffusion import GaussianOracleModel, NoiseSchedule, ScoreModel, sample_chain

ALBEDO = "albedo"
SPECULAR = "specular"
_KIND_TAG = {ALBEDO: 0x414C42, SPECULAR: 0x535045}


def to_diffusion_space(material: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(material, dtype=np.float64) - 1.0


def from_diffusion_space(x: np.ndarray, kind: str) -> np.ndarray:
    m = 0.5 * (np.asarray(x, dtype=np.float64) + 1.0)
    if kind == ALBEDO:
        return np.clip(m, 0.0, 1.0)
    return np.maximum(m, 0.0)  # specular shading is nonnegative but unbounded


class MaterialPrior:
    """Interface: draw per-view albedo / specular sample images."""

    schedule: NoiseSchedule

    def sample(self, kind: str, view_index: int, condition: np.ndarray, seed: int,
               guidance_target: np.ndarray | None = None, gamma: float = 0.0) -> np.ndarray:
        raise NotImplementedError


def _chain_rng(seed: int, view_index: int, kind: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0x7FFFFFFF, _KIND_TAG[kind], int(view_index)]))


class OraclePrior(MaterialPrior):
    """Gaussian score models centered on per-view reference images.

    sigma controls how scattered unguided draws are around the
    reference; guided draws additionally pull toward the guidance
    target, mirroring how a learned prior would be steered.
    """

    def __init__(self, albedo_refs: list[np.ndarray], specular_refs: list[np.ndarray],
                 schedule: NoiseSchedule, sigma_albedo: float = 0.15,
                 sigma_specular: float = 0.1):
        self.schedule = schedule
        self._refs = {ALBEDO: [np.asarray(a, dtype=np.float64) for a in albedo_refs],
                      SPECULAR: [np.asarray(s, dtype=np.float64) for s in specular_refs]}
        self._sigma = {ALBEDO: float(sigma_albedo), SPECULAR: float(sigma_specular)}

    def model_for(self, kind: str, view_index: int) -> GaussianOracleModel:
        mu = to_diffusion_space(self._refs[kind][view_index])
        # material-space sigma doubles under the x = 2 m - 1 map
        return GaussianOracleModel(mu, (2.0 * self._sigma[kind]) ** 2, self.schedule)

    def sample(self, kind, view_index, condition, seed, guidance_target=None, gamma=0.0):
        model = self.model_for(kind, view_index)
        rng = _chain_rng(seed, view_index, kind)
        target = None if guidance_target is None else to_diffusion_space(guidance_target)
        x0 = sample_chain(model, model.mu.shape, None, self.schedule, rng,
                          guidance_target=target, gamma=gamma, jacobian="auto")
        return from_diffusion_space(x0, kind)


class ToyPrior(MaterialPrior):
    """Learned conditional denoisers for both material components."""

    def __init__(self, albedo_model: ScoreModel, specular_model: ScoreModel,
                 schedule: NoiseSchedule):
        self.schedule = schedule
        self._models = {ALBEDO: albedo_model, SPECULAR: specular_model}

    def sample(self, kind, view_index, condition, seed, guidance_target=None, gamma=0.0):
        model = self._models[kind]
        rng = _chain_rng(seed, view_index, kind)
        shape = np.asarray(condition).shape
        target = None if guidance_target is None else to_diffusion_space(guidance_target)
        x0 = sample_chain(model, shape, condition, self.schedule, rng,
                          guidance_target=target, gamma=gamma, jacobian="auto")
        return from_diffusion_space(x0, kind)
