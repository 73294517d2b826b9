"""Longitudinal self-supervised representation learning toolkit.

Trains an autoencoder whose within-subject representation trajectories
align with a learned unit direction, generates synthetic longitudinal
image datasets with known factors to verify the resulting
disentanglement, and runs the brain-age analysis and downstream
classification protocols on top.
"""

__version__ = "0.1.0"
