"""Attribute-aware open-vocabulary detection at desk scale.

Submodules: ``tensor`` (autodiff), ``geometry``, ``matching``, ``losses``,
``model``, ``querygen``, ``dataset``, ``trainer``, ``inference``,
``evaluation``, ``config``, ``cli`` and the scikit-learn style
:class:`~lowa.estimator.LOWADetector`.
"""

__version__ = "0.1.0"
