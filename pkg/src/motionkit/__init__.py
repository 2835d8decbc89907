"""motionkit: desk-scale unified optical flow and monocular depth.

A numpy library built around four stages: patch tokenization, subspace
feature denoising with ISTA projection, optimal-transport prototype
clustering, and iterative refinement heads with convex upsampling.
Training and verification run on self-generated synthetic data with
exact ground truth.
"""

from . import autodiff
from .autodiff import Tensor, backward, finite_diff_check, no_grad

__version__ = "0.1.0"
