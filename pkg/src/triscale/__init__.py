"""Triple-scale asymptotics of weakly nonlinear oscillators, checked against direct integration."""

__version__ = "0.1.0"
