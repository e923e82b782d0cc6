"""Exception hierarchy.

Every error raised by the package derives from :class:`ForgekeyError`; the CLI
maps the three families below to exit codes (config 2, data 3, format 4).
"""


class ForgekeyError(Exception):
    exit_code = 1


class ConfigError(ForgekeyError, ValueError):
    exit_code = 2


class DataError(ForgekeyError):
    exit_code = 3


class FormatError(ForgekeyError):
    exit_code = 4


# numerics / autodiff
class ShapeError(ForgekeyError, ValueError):
    pass


class StateError(ForgekeyError, RuntimeError):
    pass


class RangeError(ForgekeyError, ValueError):
    pass


class NumericsError(ForgekeyError, FloatingPointError):
    def __init__(self, op, detail="non-finite value"):
        super().__init__(f"{op}: {detail}")
        self.op = op


class ContractError(ForgekeyError, ValueError):
    pass


# memory bank / data
class DegenerateKeyError(DataError):
    pass


class BuildError(DataError):
    pass


class EmptyMemoryError(DataError):
    pass


class UnknownIdError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class StaleSampleError(DataError):
    pass


class EmptyInputError(DataError, ValueError):
    pass


class DegenerateFeaturesError(DataError):
    pass


class NoViableCandidateError(DataError):
    pass
