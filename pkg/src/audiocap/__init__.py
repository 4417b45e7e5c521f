"""Codec-token audio captioning and audio-text retrieval at desk scale."""

__version__ = "0.1.0"
