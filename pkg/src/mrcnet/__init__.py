"""Multi-resolution contextual network with adversarial training for retinal vessel segmentation."""

__version__ = "0.1.0"
