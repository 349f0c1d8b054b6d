"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration or shape/argument mismatch caught before work starts."""


class ParseError(ValueError):
    """Malformed input file.  Carries the offending path and byte offset."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = int(offset)


class NumericError(ArithmeticError):
    """NaN or Inf appeared where only finite values are allowed."""


class TrainingDiverged(NumericError):
    """Loss became non-finite during training."""

    def __init__(self, iteration, layer, message=""):
        detail = f" ({message})" if message else ""
        super().__init__(f"non-finite loss at iteration {iteration}, first bad layer: {layer}{detail}")
        self.iteration = iteration
        self.layer = layer
