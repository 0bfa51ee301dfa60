"""Exception types raised across the package."""


class SBNError(Exception):
    pass


class DomainError(SBNError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ShapeError(SBNError, ValueError):
    pass


class ContractError(SBNError, ValueError):
    """Operation called on inputs that violate its preconditions."""


class CapacityError(SBNError):
    """A layer is too wide for exact state enumeration."""

    def __init__(self, layer: int, width: int, cap: int):
        self.layer = layer
        self.width = width
        self.cap = cap
        super().__init__(
            f"layer {layer} has {width} units, exceeding the enumeration cap of {cap}"
        )


class DivergenceError(SBNError):
    """Training produced non-finite parameters."""

    def __init__(self, epoch: int, block: str):
        self.epoch = epoch
        self.block = block
        super().__init__(f"training diverged at epoch {epoch} (parameter block {block})")
