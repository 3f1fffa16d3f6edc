"""Hyperbolic graph auto-encoder with semi-implicit posteriors and an MI regularizer."""

from . import autodiff, geometry, graphio, model, objective, train, evaluate

__all__ = ["autodiff", "geometry", "graphio", "model", "objective", "train", "evaluate"]
