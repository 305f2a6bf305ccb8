"""Covariate-guided sparse mixture-of-experts layer for frozen forecasting
backbones, with a one-shot federated expert-sharing simulator."""

__version__ = "0.1.0"
