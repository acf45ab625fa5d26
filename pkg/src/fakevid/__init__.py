"""Multimodal fake-news-video detection with test-time training.

A compact, CPU-only research codebase: a from-scratch autodiff engine, a
cross-modal transformer encoder trained jointly on detection and masked-token
reconstruction, and a test-time training loop that adapts the encoder to
shifted test distributions using the reconstruction objective alone.
"""

__version__ = "0.1.0"
