"""Commercial-premium optimization under margin, conversion and fairness objectives."""

__version__ = "0.1.0"
