"""Zernike aberration toolkit: forward optics, differentiable physics losses,
blind coefficient recovery and Wiener restoration."""

__version__ = "0.1.0"
