"""forgebox: build reproducible environment images from declarative roles."""

__version__ = "0.1.0"
