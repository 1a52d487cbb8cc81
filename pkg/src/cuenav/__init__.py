"""Foreground-cue visual navigation: data generation, augmentation, training and closed-loop evaluation."""

__version__ = "0.1.0"
