"""Quantile LSTM forecasters of next-day river discharge, including the
Hydra model: a shared encoding body with swappable prediction heads."""

__version__ = "0.1.0"
