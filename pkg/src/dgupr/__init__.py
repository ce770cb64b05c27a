"""dgupr: diffusion-GAN adversarial training for unsupervised phoneme
recognition, desk-scale and self-contained (synthetic features, tiny nets)."""

__version__ = "0.1.0"
