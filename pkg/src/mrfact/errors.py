"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 2, anything under
NumericalError exits 3, file/schema problems exit 4.
"""


class MrfactError(Exception):
    """Base class for all package errors."""


class DimensionError(MrfactError):
    """Incompatible or invalid array dimensions."""


class InvalidIndexError(MrfactError):
    """An index set entry falls outside its universe or repeats."""


class InvariantError(MrfactError):
    """A constructed or loaded value violates a structural invariant."""


class NumericalError(MrfactError):
    """A numerical routine failed (non-convergence, ill-conditioning)."""


class GradientInconsistencyError(NumericalError):
    """An objective's gradient contradicts the descent-slope identity."""


class LineSearchError(NumericalError):
    """No acceptable step found within the halving budget."""


class InfeasibleStateError(MrfactError):
    """A decision state admits no valid action."""


class TrainingDivergenceError(NumericalError):
    """Training produced non-finite parameters or gradients."""


class SchemaError(MrfactError):
    """A file failed parsing or schema validation."""
