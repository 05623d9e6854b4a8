"""Full counting statistics of periodically driven quantum-dot pumps.

Modules
-------
models       rates, generators and drives
propagation  augmented-state integration over a period
fcs          currents, noise currents and per-cycle moments
optimizer    adjoint-gradient control optimisation
oracle       Gillespie sampling of jump trajectories
cli          ``fcspump`` command line entry point
"""

__version__ = "0.1.0"
