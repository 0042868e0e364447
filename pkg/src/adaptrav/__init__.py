"""Online-adaptive long-range traversability estimation, desk scale.

Self-supervised labels from accumulated near-range LiDAR train a visual
cost regressor on the drive; a joint loss-similarity selection mechanism
picks which expert head to train and whether a head or the geometric
LiDAR estimate serves each frame.
"""

__version__ = "0.1.0"
