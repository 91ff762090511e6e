"""Non-parallel multi-domain voice conversion with a single source-and-target conditional generator."""

__version__ = "0.1.0"
