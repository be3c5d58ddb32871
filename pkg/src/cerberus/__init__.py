"""Part-based 3D reconstruction from single images, trained with 2D supervision only."""

__version__ = "0.1.0"
