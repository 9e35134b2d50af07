"""Periodic 2D lattices with point defects, a reference EAM-style potential,
a linear invariant surrogate, and the machinery to fit the surrogate and
measure how its geometry/energy errors scale with training-domain size.
"""

__version__ = "0.1.0"
