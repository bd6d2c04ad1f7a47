"""Hierarchical convolution-Transformer point cloud classifier.

A desk-scale implementation: a from-scratch autodiff tensor engine,
farthest-point-sampling / ball-query geometric kernels, graph-convolution
local aggregation, scalar/vector self-attention with interchangeable
mechanisms and pairwise operators, and a training/evaluation pipeline for
synthetic point cloud datasets.
"""

__version__ = "0.1.0"
