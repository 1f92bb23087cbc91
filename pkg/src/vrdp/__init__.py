"""Diffusion visuomotor policy with a variational feature bottleneck."""
