"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class MembershipError(ValueError):
    """An architecture value lies outside its search-space domain."""

    def __init__(self, field, value, reason):
        self.field = field
        self.value = value
        super().__init__(f"{field}={value!r}: {reason}")


class ArchParseError(ValueError):
    def __init__(self, message, position):
        self.position = position
        super().__init__(f"{message} (at position {position})")


class CheckpointError(ValueError):
    pass


class EmptyPoolError(RuntimeError):
    pass


class OracleMiss(KeyError):
    pass


class BudgetExceeded(RuntimeError):
    pass
