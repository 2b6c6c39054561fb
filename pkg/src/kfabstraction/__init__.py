"""Knowledge-filtered abstractions of linear stochastic systems, with
controller refinement and satisfaction-probability verification."""

__version__ = "0.1.0"
