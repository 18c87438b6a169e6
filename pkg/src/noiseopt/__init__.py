"""Inference-time noise optimization for output diversity.

Subpackages cover the numerical substrate, a minimal reverse-mode
differentiation engine, colored-noise initialization, feature extraction,
set-diversity statistics, the radius prior, toy generators, the composite
objective, the gradient loop, and frequency-band trajectory analysis.
"""

__version__ = "0.1.0"
