"""Diverse valuable counterfactual explanations in a disentangled latent space."""

__version__ = "0.1.0"
