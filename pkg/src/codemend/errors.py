"""Exception taxonomy shared across the pipeline.

The CLI maps these onto process exit codes: usage problems exit 1, data
problems exit 2, integrity problems exit 3.
"""


class CodemendError(Exception):
    """Base class for all pipeline errors."""


class UsageError(CodemendError):
    """Bad invocation: unknown flags, missing required arguments, bad combinations."""


class DataError(CodemendError):
    """Invalid or malformed data: records, datasets, manifests, packing overflows."""


class ExtractionError(DataError):
    """C source that cannot be segmented into functions (e.g. unbalanced braces)."""


class ValidationError(DataError):
    """A record or pairing violates a structural invariant."""


class RewardError(DataError):
    """Reward computation is undefined for the given inputs (e.g. empty sequence)."""


class IntegrityError(CodemendError):
    """A persisted artifact is corrupt, truncated, or from an unsupported format version."""


class TrainingDiverged(CodemendError):
    """Loss became non-finite during optimization."""


class InputError(CodemendError):
    """A tensor-level precondition was violated (out-of-range ids, empty prompt)."""
