"""Multi-task, multi-instance alignment of 3D image patches with report sentences."""

__version__ = "0.1.0"
