"""Test package for posetrack."""
