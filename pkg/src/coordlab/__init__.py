"""Coordination-policy laboratory: evolving incompatible teammate populations
against a continually learned multi-head ego policy, plus baselines, metrics
and empirical theory checks."""

__version__ = "0.1.0"
