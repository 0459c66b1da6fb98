"""Mutually-supervised multi-source denoising fusion (M2SDF).

A numpy library for self-supervised denoising of sonar-like imagery:
noise models (Gaussian / Poisson / multiplicative Rayleigh speckle),
single-frame self-supervised denoisers, quality metrics, a small
trainable CNN, the multi-source fusion trainer, and the denoiser
selection policy, plus an experiment CLI.

Images are 2-D float32 numpy arrays with intensities in [0, 1].
"""

from m2sdf import denoisers, evalkit, fusion, imagecore, nnmodel, noisegen

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "denoisers",
    "evalkit",
    "fusion",
    "imagecore",
    "nnmodel",
    "noisegen",
]
