"""clegasket: Monte Carlo toolkit for loop-ensemble gasket geometry.

Simulates the reflected angular diffusion that drives a branching radial
Loewner exploration, extracts loop-closure events and traces, and fits
fractal dimensions of lattice gaskets against the predicted exponent.
"""

__version__ = "0.1.0"
