"""relmotion: unsupervised object segmentation and relational motion learning
on simulated chaser/evader image sequences."""

__version__ = "0.1.0"
