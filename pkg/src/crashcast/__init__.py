"""Weekly crash-risk forecasting with a moving-window ConvLSTM ensemble."""

__version__ = "0.1.0"
