"""Lensless multi-view imaging toolkit: capture simulation, Wiener recovery,
and an epipolar attention renderer trained end-to-end at desk scale."""

__version__ = "0.1.0"
