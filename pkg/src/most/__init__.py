"""Many-objective multi-solution transport: match objectives to solutions with
optimal transport, then move each solution along a plan-weighted common
descent direction."""

__version__ = "0.1.0"
