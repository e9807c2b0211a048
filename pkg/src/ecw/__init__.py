"""Experimentally constrained wavefunctions: constrained HF and CC/EOM solvers
with an exact determinant-space oracle."""

__version__ = "0.1.0"
