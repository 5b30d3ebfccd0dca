"""lmpkit: leaky max pooling, proposal clustering and a toy keypoint network."""

__version__ = "0.1.0"
