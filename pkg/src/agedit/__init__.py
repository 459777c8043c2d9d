"""Miniature diffusion framework for fine-grained age editing on synthetic faces."""
__version__ = "0.1.0"
