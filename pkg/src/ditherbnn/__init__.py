"""Binary CNN engine with dithered-sign activations and threshold design."""

__version__ = "0.1.0"
