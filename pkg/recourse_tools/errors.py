# errors.py
"""Exception hierarchy shared by every recourse_tools module.

InputError subclasses map to exit code 2, RuntimeFailure subclasses to 3.
"""


class RecourseError(Exception):
    exit_code = 3


class InputError(RecourseError):
    exit_code = 2


class RuntimeFailure(RecourseError):
    exit_code = 3


# --- data / schema ---

class SchemaError(InputError):
    pass


class MissingColumn(InputError):
    pass


class UnknownLevel(InputError):
    pass


class NonNumeric(InputError):
    pass


class OutOfRange(InputError):
    """A continuous value lies outside the schema's declared [min, max]."""


class EmptyDataset(InputError):
    pass


class WidthMismatch(InputError):
    pass


class NoPositives(RuntimeFailure):
    def __init__(self, group):
        super().__init__(f"subgroup {group} has no positive instances")
        self.group = group


# --- classifier ---

class SingleClassDataset(InputError):
    pass


class CorruptFile(InputError):
    pass


class SchemaMismatch(InputError):
    pass


# --- model / sampler ---

class NonFinite(RuntimeFailure):
    pass


class EmptyLevel(RuntimeFailure):
    pass


class AdaptationDiverged(RuntimeFailure):
    pass


class AllChainsDiverged(RuntimeFailure):
    pass


# --- diagnostics / metrics ---

class InsufficientChains(InputError):
    pass


class InsufficientDraws(InputError):
    pass


class EmptyBatch(InputError):
    pass


class NeighborhoodTooSmall(InputError):
    pass


# --- cli ---

class SelectorError(InputError):
    pass
