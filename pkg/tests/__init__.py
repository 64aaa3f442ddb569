"""Test package for FGO-SLAM."""
