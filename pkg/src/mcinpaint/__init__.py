"""Desk-scale multi-column image inpainting with verified losses."""

from mcinpaint.autodiff import ConvSpec, Tensor4

__all__ = ["Tensor4", "ConvSpec"]

__version__ = "0.1.0"
