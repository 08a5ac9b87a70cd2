"""Desk-scale laboratory for semantically constrained adversarial example
generation: residual-guided DDIM attack sampling, masked guidance, a
differentiable Gaussian-splat pipeline, taxonomy-built evasion tasks, and
relative attack-success evaluation over tiny trainable models."""

__version__ = "0.1.0"
