"""busaug: hybrid diffusion augmentation for ultrasound-style images."""

__version__ = "0.1.0"
