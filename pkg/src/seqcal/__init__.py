"""Probabilistic sequence-to-sequence methods with uncertainty-calibration metrics.

The package layout mirrors the pipeline: `corpus` builds synthetic token
tasks, `model` and `training` fit a small autoregressive model under one of
several probabilistic heads, `inference` decodes against the posterior-mean
token distribution, `rouge` scores hypothesis quality, `calib` turns scored
predictions into calibration and selective-generation reports, and `cli`
wires the stages into a reproducible pipeline.
"""

__version__ = "0.1.0"
