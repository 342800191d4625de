"""Elastic trainable-tensor selection for fast on-device training, at desk scale."""

__version__ = "0.1.0"
