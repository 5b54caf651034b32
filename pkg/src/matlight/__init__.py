"""matlight: physically based inverse rendering of UV-space materials and
environment lighting, regularized by diffusion-prior samples."""

__version__ = "0.1.0"
