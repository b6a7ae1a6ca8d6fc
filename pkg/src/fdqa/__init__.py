"""Hierarchical diagnostic-quality classification of fundus photographs.

Modules: ``tensor`` (autodiff core), ``backbones`` and ``checkpoint``,
``hierarchy``, ``explain`` (Grad-CAM), ``metrics``, ``data``, ``config`` and
``cli``.
"""

__version__ = "0.1.0"
