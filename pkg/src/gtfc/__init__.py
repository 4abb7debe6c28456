"""Global time-frequency context recalibration in a small speaker-embedding stack.

Subpackages:
    tensor    dense arrays with reverse-mode autodiff and GTF1 serialization
    frontend  log-mel features, energy VAD, normalization, chunk sampling
    blocks    SE and global-context recalibration blocks
    backbone  residual CNN embedder, training loop, checkpoints
    metrics   cosine scoring, EER, minDCF, score fusion
    synth     synthetic speaker corpus generator
    cli       command-line pipeline driver
"""

from .tensor import Tensor, gradcheck, load_gtf1, no_grad, save_gtf1, set_default_dtype

__all__ = [
    "Tensor",
    "gradcheck",
    "load_gtf1",
    "no_grad",
    "save_gtf1",
    "set_default_dtype",
]

__version__ = "0.1.0"
