"""
IMRE - Interpretable Modeling and Reduction of Unknown Errors
=============================================================

Learns the errors of a mechanistic forward operator with a conditional
generative model, and corrects them jointly with the inverse solution.

Features:
- Synthetic forge of labeled erroneous forward operators
- Conditional VAE error generator on a small reverse-mode autodiff engine
- Self-organizing map atlas for attributing the error source
- Aliev-Panfilov simulation of paced heart-surface potentials
- Alternating Tikhonov / bounded derivative-free inverse solver
- Reproducible CLI pipeline writing CSV and binary-container reports

Author: AplUSAndmINUS
License: GPL-3.0
"""

__version__ = "0.1.0"
__author__ = "AplUSAndmINUS"
__license__ = "GPL-3.0"

from .config import ExperimentConfig, load_config
from .errors import ImreError
from .pipeline import run_pipeline

__all__ = ["ExperimentConfig", "ImreError", "load_config", "run_pipeline"]
