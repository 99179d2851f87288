"""Robust LQR synthesis from Bayesian posterior samples of a linear system."""

from .evaluation import cost_lqr, dare, dlyap, suboptimality
from .inference import PosteriorSpec, SampleSet, sample_confidence_region
from .model import Dataset, GainPolicy, LinearSystem, Rollout, make_toeplitz_system, simulate_dataset
from .synthesis import SynthesisConfig, SynthesisReport, synthesize

__version__ = "0.1.0"
