"""Safe output-feedback adaptive optimal control toolkit.

A robustified control-barrier-function quadratic program filters an
actor-critic-learned stabilizing policy while a DNN-based adaptive observer
supplies state estimates from partial measurements.
"""

__version__ = "0.1.0"
