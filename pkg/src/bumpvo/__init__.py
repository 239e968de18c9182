"""Monocular visual-odometry front-end with adaptive descriptor/flow tracking,
a synthetic bump-sequence generator, and trajectory-error evaluation."""

__version__ = "0.1.0"
