"""Causal effect estimation for a binary treatment and binary outcome.

G-estimation of an additive structural nested mean model, a stabilized-IPTW
marginal structural model, balance diagnostics, BCa bootstrap intervals and
a calibrated synthetic generator, behind a small command-line pipeline.
"""

__version__ = "0.1.0"
