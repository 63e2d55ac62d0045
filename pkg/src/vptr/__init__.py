"""Video future-frame prediction with factorized spatiotemporal transformers.

A CNN frame autoencoder maps pixels to low-resolution feature maps; stacked
transformer blocks with window-local spatial attention and per-location
temporal attention predict future feature maps, either step by step
(autoregressive) or in one shot from learned queries (non-autoregressive).
Everything runs on a small numpy-backed reverse-mode autodiff core.
"""

__version__ = "0.1.0"
