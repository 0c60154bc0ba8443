class InvalidArgument(ValueError):
    pass


class StateError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    """Malformed model JSON. ``position`` is the character offset of the problem."""

    def __init__(self, msg, position=None):
        if position is not None:
            msg = f"{msg} (at char {position})"
        super().__init__(msg)
        self.position = position


class DataFormatError(ValueError):
    """Malformed CSV input. ``line`` is 1-based, counting the header."""

    def __init__(self, msg, line=None):
        if line is not None:
            msg = f"line {line}: {msg}"
        super().__init__(msg)
        self.line = line


class NumericalDivergence(FloatingPointError):
    pass
