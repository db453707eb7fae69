"""Pose attention blocks on a small numpy autodiff core.

Submodules: ``tensor`` (autodiff), ``nn`` (layers), ``blocks`` (DRM, CAM,
PAM, DREAM), ``backbone`` (IR trunk and checkpoints), ``accounting``
(parameter and MAC counts), ``harness`` (synthetic data and training) and
``cli``.
"""

__version__ = "0.1.0"
