"""Desk-scale toolkit: Fisher-diagonal task affinity scoring, centroid matching,
related-class few-shot fine-tuning, and an empirical convergence harness for
the affinity score along averaged noisy-SGD trajectories."""

__version__ = "0.1.0"
