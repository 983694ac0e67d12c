"""Exception types shared across the package."""


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested for a zero-norm vector."""


class InsufficientDataError(ValueError):
    pass


class CSVParseError(ValueError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class SchemaError(ValueError):
    pass


class TeacherFormatError(ValueError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class StateError(RuntimeError):
    """An operation needed state (e.g. retained activations) that is missing."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, group: str):
        super().__init__(f"non-finite gradient in parameter group {group!r}")
        self.group = group


class CheckpointError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""
