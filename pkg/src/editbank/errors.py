"""Exception types shared across the package."""


class EditBankError(Exception):
    """Base class for all editbank errors."""


class ValidationError(EditBankError, ValueError):
    """Malformed inputs: bad shapes, ranges, or missing files."""


class BankFormatError(EditBankError):
    """Base class for instruction-bank file problems."""


class BankVersionError(BankFormatError):
    """Unrecognized magic bytes or unsupported format version."""


class BankChecksumError(BankFormatError):
    """Payload bytes do not match the manifest checksum."""


class BankShapeError(BankFormatError):
    """Manifest metadata and payload sizes disagree."""


class TrainingDivergedError(EditBankError):
    """Inversion produced a non-finite loss; carries segment/step context."""

    def __init__(self, message: str, segment: int, step: int):
        super().__init__(message)
        self.segment = segment
        self.step = step
