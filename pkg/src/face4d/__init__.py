"""Multi-camera RGB-D 4D face reconstruction and facial-motion statistics."""

__version__ = "0.1.0"
