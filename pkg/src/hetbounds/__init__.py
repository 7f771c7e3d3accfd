"""Heterogeneous treatment-effect bounds under sample selection.

Cross-fitted nuisance learners feed orthogonal pseudo-outcomes for the lower
and upper bound. These are projected on basis functions of a heterogeneity
variable and come with pointwise intervals and uniform bootstrap bands.
"""

__version__ = "0.1.0"
