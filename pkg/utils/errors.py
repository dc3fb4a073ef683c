"""Exception hierarchy shared by the library and the command line.

Every error carries the process exit code the CLI reports for it.
"""


class ToloError(Exception):
    exit_code = 2


class ShapeError(ToloError):
    """Grid or matrix dimensions do not fit the operation"""


class InputError(ToloError):
    """An argument lies outside the operation's domain"""


class ContractError(ToloError):
    """An API was called in a state it does not support"""


class ConfigError(ToloError):
    """A configuration value violates its invariant"""


class LayoutParseError(ToloError):
    """A layout record is malformed (distinct from a rule rejection)"""


class GridFormatError(ToloError):
    """A stored grid or image does not follow its file format"""


class NumericError(ToloError):
    """A computation produced NaN or Inf"""

    exit_code = 3


class GuidanceDivergedError(NumericError):
    def __init__(self, step: int, stage: str, detail: str):
        self.step = step
        self.stage = stage
        super().__init__(f"non-finite value at step t={step} ({stage} stage): {detail}")


class ReplayMismatchError(ToloError):
    """Re-executed artifacts differ from the recorded checksums"""

    exit_code = 3
