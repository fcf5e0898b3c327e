"""Cognitive-module UAV vision-language navigation on a voxel desk world."""

__version__ = "0.1.0"
