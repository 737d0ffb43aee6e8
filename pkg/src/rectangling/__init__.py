"""Wide-angle distortion synthesis, rectification, and TPS mesh rectangling."""

__version__ = "0.1.0"
