"""Bridge peer: answers generator/feature/reward requests over the frame
protocol so external models can stand behind the noise-optimization client."""

__version__ = "0.1.0"
