"""Joint point-cloud and multi-view 3D shape recognition with attention embedding fusion."""

__version__ = "0.1.0"
