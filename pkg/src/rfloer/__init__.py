"""Loop-space variational tools for magnetic flows on twisted cotangent bundles of the 2-torus."""
__version__ = "0.1.0"
