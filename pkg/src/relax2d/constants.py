"""Shared numerical tolerances.

Every test and acceptance check pulls its tolerances from here so that the
thresholds live in one place.
"""

# identities that hold exactly in exact arithmetic (objectivity, symmetry)
IDENTITY_TOL = 1e-10
# two independent routes to the same closed form
ORACLE_TOL = 1e-12
# analytic gradient vs. central differences (relative)
GRADIENT_RTOL = 1e-5
GRADIENT_FD_STEP = 1e-6
# assembled FEM gradient vs. central differences (relative)
FEM_GRADIENT_RTOL = 1e-4
# rank-one chord inequality slack
CHORD_SLACK = 1e-9
# ROC: early stop on max nodewise decrease, tie detection between splits
ROC_EPSILON = 1e-12
ROC_TIE_EPS = 1e-13
# grid-hull membership slack for off-lattice line points
HULL_SLACK = 1e-12
# laminate tree consistency (rank-one / weighted sum checks)
TREE_TOL = 1e-12
# ROC results vs. analytic values
ROC_VALUE_TOL = 1e-9
# nonsmooth-set proximity that triggers the finite-difference fallback
NONSMOOTH_TOL = 1e-8

DEFAULT_MEMORY_BUDGET = 2 * 1024**3
