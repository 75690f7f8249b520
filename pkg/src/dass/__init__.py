"""DASS: distilled audio state-space models and the audio needle-in-a-haystack toolkit."""

__version__ = "0.1.0"
