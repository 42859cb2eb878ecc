"""Mean-field LQG social optimum under volatility-uncertain common noise."""

__version__ = "0.1.0"
