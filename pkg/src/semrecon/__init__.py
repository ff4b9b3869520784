"""Differentiable single-view mesh fitting with semantic part consistency:
soft rasterization, weak-perspective cameras, texture flow and an EM-style
template/canonical-UV learning loop.
"""

__version__ = "0.1.0"
