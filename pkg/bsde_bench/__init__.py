"""Monte Carlo benchmark for explicit, implicit and Malliavin-weight BSDE schemes."""

__version__ = '1.0.0'
