"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration. ``problems`` lists every offending field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DatasetError(RuntimeError):
    pass


class ExportError(RuntimeError):
    def __init__(self, message, written=0):
        super().__init__(f"{message} (wrote {written} samples before failing)")
        self.written = written


class NonFiniteLossError(FloatingPointError):
    def __init__(self, name, value=float("nan")):
        super().__init__(f"non-finite loss {name!r}: {value}")
        self.name = name


class NumericError(ArithmeticError):
    pass


class CheckpointError(RuntimeError):
    def __init__(self, message, last_good_round=0):
        super().__init__(f"{message} (last good round: {last_good_round})")
        self.last_good_round = last_good_round
