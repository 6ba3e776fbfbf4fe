"""Bayesian flow network for SMILES strings: schedules, sampler, network and fine-tuning."""

__version__ = "0.1.0"
