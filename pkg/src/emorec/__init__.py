"""Desk-scale continuous emotion recognition pipeline.

Masked-autoencoder feature extraction, sliding-window video segmentation,
TCN + transformer temporal models, and VA/Expr/AU task heads trained with
CCC and cross-entropy objectives. Everything runs on a small numpy-backed
autodiff engine so the whole pipeline is self-contained and testable on
synthetic data.
"""

__version__ = "0.1.0"
