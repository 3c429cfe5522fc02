"""Budbreak prediction from daily weather with single- and multi-task recurrent models."""

__version__ = "0.1.0"
