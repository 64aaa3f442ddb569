"""FGO-SLAM - Gaussian SLAM with an opacity radiance field and direct mesh extraction."""

__version__ = "0.1.0"
__author__ = "Team"
__description__ = "Desk-scale Gaussian SLAM with global adjustment and mesh extraction"
