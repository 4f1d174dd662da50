"""Debiasing pipeline toolkit.

Trains an intentionally biased classifier, mines its highest-loss training
samples as bias-conflict candidates, captions them, filters the captions by
word frequency, regenerates conflict samples from the surviving prompts, and
retrains a debiased classifier on the amplified dataset.
"""

__version__ = "0.1.0"
