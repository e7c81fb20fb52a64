"""Exception hierarchy shared by all mtcn modules.

CLI exit codes map onto these families: usage problems exit 1, data and
configuration problems exit 2, numeric failures exit 3.
"""


class MtcnError(Exception):
    """Base class for all mtcn errors."""


class ConfigurationError(MtcnError):
    """Invalid shapes, hyperparameters, or architecture settings."""


class InputError(MtcnError):
    """Invalid runtime inputs: bad masks, mismatched batches, bad datasets."""


class AvailabilityError(InputError):
    """A timestamp flagged unavailable was used as if it existed."""


class SplitInfeasibleError(InputError):
    """A train/test split cannot satisfy its per-class floor."""


class GenerationError(InputError):
    """Synthetic dataset generation could not place all segments."""


class StateError(MtcnError):
    """Operation requires state that was never produced (e.g. running
    batch-norm statistics before any training forward pass)."""


class NumericError(MtcnError):
    """Non-finite values appeared where finite ones are required."""
