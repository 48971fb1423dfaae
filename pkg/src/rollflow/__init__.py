"""Rolling rectified-flow matching for joint audio-video generation."""

__version__ = "0.1.0"
