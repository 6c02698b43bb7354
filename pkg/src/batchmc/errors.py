"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes are incompatible with an operation."""


class ContractError(ValueError):
    """A kernel, target or trace function broke its structural contract."""


class BatchSemanticsError(ContractError):
    """A target log-prob function mixes or drops the chain axis."""
