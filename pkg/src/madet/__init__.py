"""Two-stage convolutional-network pipeline for microaneurysm detection in
fundus images: preprocessing, balanced patch sampling, two trainable CNNs,
probability-map post-processing, and FROC/CPM evaluation."""

__version__ = "0.1.0"
