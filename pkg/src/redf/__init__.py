"""RED-F anomaly prediction for multivariate time series."""
