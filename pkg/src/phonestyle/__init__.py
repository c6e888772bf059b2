"""Phone-level content and style disentanglement for expressive speech synthesis."""

__version__ = "0.1.0"
