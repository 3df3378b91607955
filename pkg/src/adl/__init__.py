"""Adversarially trained image denoising with a numpy autodiff core."""

__version__ = "0.1.0"
