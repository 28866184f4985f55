"""Scene-conditioned human body placement with two-stage basis point set features."""

__version__ = "0.1.0"
