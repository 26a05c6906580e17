"""Explainable recommendation with attentive, adversarial and counterfactual scorers."""

__version__ = "0.1.0"
