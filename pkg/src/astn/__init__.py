"""Atlas-guided nodule segmentation by latent-feature co-registration."""

__version__ = "0.1.0"
