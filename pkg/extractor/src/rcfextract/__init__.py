"""ResNet-101 feature extraction into RCF1 interchange files."""

__version__ = "0.1.0"
