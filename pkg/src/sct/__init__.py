"""Entropic optimal-transport routing toolkit.

Library + CLI for correlation-assignment experiments on plain feature
matrices: a log-domain Sinkhorn solver with convergence traces, an
edge-regularized part-patch cost, plan-gated multi-head cross-attention,
a CCA-debiased clustering probe, a synthetic denoising-loop harness, and
voxel-overlap / cluster-agreement metrics.
"""

__version__ = "0.1.0"
