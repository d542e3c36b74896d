"""hypolab: computable bracket and Malliavin-covariance diagnostics for SDEs.

The package turns an SDE with locally Lipschitz, monotone drift into
computable objects: a small DSL for the coefficient fields, Lie-bracket and
spanning (Hormander-type) analysis, simulation of the state together with
its first-variation and inverse flows, Malliavin covariance matrices,
iterated Stratonovich integrals and expansion remainders, and Monte Carlo
estimators for tail, moment, and density bounds.
"""

__version__ = "0.1.0"

from . import brackets, errors, estimators, fieldlang, flows  # noqa: F401
