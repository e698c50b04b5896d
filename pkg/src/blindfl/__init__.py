"""BlindFL: segmented, homomorphically aggregated federated learning."""

__version__ = "0.1.0"
