"""Grid-level truck activity prediction from raw GPS traces."""

__version__ = "0.1.0"
