"""Denoising of 3D MR volumes with a hybrid residual MLP-CNN."""

__version__ = "0.1.0"
