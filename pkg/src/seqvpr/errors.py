"""Exception types shared across the package.

The CLI maps these onto exit codes (see cli.py): usage problems exit 1,
data/format problems exit 2, numeric failures exit 3.
"""


class FormatError(Exception):
    """An on-disk artifact has a bad magic, version, or malformed field."""


class IntegrityError(FormatError):
    """An artifact parsed correctly but is internally inconsistent."""


class NumericError(Exception):
    """A numeric computation produced a non-finite or invalid result."""


class MiningExhaustedError(NumericError):
    """No geographically eligible negative exists in the mining cache."""


class TrainingDivergedError(NumericError):
    """Loss or gradients became non-finite during training."""
