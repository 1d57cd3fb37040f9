"""Warm-started federated learning simulator.

Clients personalise a shared denoising generator with low-rank adapters; the
server turns the adapters into a synthetic warm-start set, fine-tunes on a
compact subset during aggregation, and clients build personal models by
dynamic self-distillation.
"""
__version__ = "0.1.0"
