from typing import List, Optional


class FedSupError(Exception):
    """Base class for every error raised by the simulator"""


class RejectedInputError(FedSupError, ValueError):
    """An operation was called with arguments outside its contract"""


class FormatError(FedSupError, ValueError):
    """A binary artifact could not be decoded"""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DatasetFormatError(FormatError):
    """Corrupt or truncated FSDS dataset file"""


class ParamsFormatError(FormatError):
    """Corrupt or truncated FSUP parameter file"""


class ConfigError(FedSupError, ValueError):
    """Experiment or sweep configuration failed validation"""

    def __init__(self, message: str, fields: Optional[List[str]] = None):
        self.fields = fields or []
        if self.fields:
            message = message + "\n" + "\n".join(f"  - {f}" for f in self.fields)
        super().__init__(message)
