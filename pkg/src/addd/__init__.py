"""Online contamination detection for water distribution networks.

LSTM-VAE anomaly detection with dual-threshold latent drift detection,
deployed as one detector per chlorine sensor, with a monitoring center
that localizes contamination on the directed flow graph.
"""

__version__ = "0.1.0"
