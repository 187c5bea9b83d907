"""Self-supervised time-series representations via temporal-spectral fusion."""

__version__ = "0.1.0"
