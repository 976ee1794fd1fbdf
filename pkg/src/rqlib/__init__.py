"""Residual vector quantization, patch codecs, and a two-axis autoregressive model.

Submodules
----------
autodiff     dense f64 tensors with tape-based reverse-mode differentiation
codebook     shared code embeddings, EMA training, restarts, RQCB format
rqcore       residual quantization, losses, stochastic codes, RQCM format
patchcodec   orthonormal/trainable patch codecs, stage-1 training, PPM/RQPC
transformer  spatial+depth autoregressive model, sampling, FLOP accounting
synthetic    seeded synthetic image generator
cli          command-line entry points
"""

from . import autodiff, codebook, errors, patchcodec, rqcore, synthetic, transformer

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "codebook",
    "errors",
    "patchcodec",
    "rqcore",
    "synthetic",
    "transformer",
    "__version__",
]
