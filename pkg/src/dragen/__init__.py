"""Distributionally robust grasp-policy learning via adversarial latent-space environment generation."""

__version__ = "0.1.0"
SCHEMA_VERSION = 1
