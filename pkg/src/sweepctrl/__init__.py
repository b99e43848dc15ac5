"""Numerical optimal control of perturbed sweeping processes.

The state is dragged inside an intersection of smooth sublevel sets; the
normal-cone reaction force is approximated by smooth exponential penalties
whose strength is driven to infinity along a continuation schedule.  The
package parses problem data given as arithmetic expressions, integrates the
penalized and projected (catching-up) dynamics, solves the penalized optimal
control problem, and checks candidate solutions against the first-order
optimality conditions of the limit problem at grid resolution.
"""

from .backend import NAME as backend_name
from .exprcore import (
    DomainError,
    ExprAst,
    ExprSyntaxError,
    IndexOutOfRange,
    ScalarField,
    UnknownIdentifier,
    eval_with_derivatives,
    parse_expression,
    serialize,
)

__version__ = "0.1.0"

__all__ = [
    "backend_name",
    "parse_expression",
    "serialize",
    "eval_with_derivatives",
    "ScalarField",
    "ExprAst",
    "ExprSyntaxError",
    "UnknownIdentifier",
    "IndexOutOfRange",
    "DomainError",
]
