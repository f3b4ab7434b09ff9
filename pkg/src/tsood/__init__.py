"""Time-series out-of-distribution detection toolkit and benchmark harness."""

__version__ = "0.1.0"
