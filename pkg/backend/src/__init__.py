"""posetrack - Dual-quaternion pose tracking with online Gaussian-process
disturbance compensation."""

__version__ = "0.1.0"
