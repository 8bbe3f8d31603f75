"""Shared exception types."""


class DimensionError(ValueError):
    """Tensor or vector shapes do not conform."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class NumericError(ArithmeticError):
    """A numeric failure (non-finite gradient or loss) aborted an operation."""


class FormatError(ValueError):
    """A binary or text file failed to parse; carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class UnknownSpeciesError(KeyError):
    """Species id has no token-table row; caller must use the text path."""

    def __init__(self, species_id: int):
        super().__init__(species_id)
        self.species_id = species_id

    def __str__(self) -> str:
        return f"unknown species id {self.species_id}: no token-table entry"
