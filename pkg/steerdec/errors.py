class SteerDecError(Exception):
    """Base class for every error raised by steerdec."""


class DimensionError(SteerDecError, ValueError):
    pass


class DomainError(SteerDecError, ValueError):
    pass


class CapacityError(SteerDecError, RuntimeError):
    pass


class ContractError(SteerDecError, RuntimeError):
    pass


class TrainingDivergedError(SteerDecError, ArithmeticError):
    pass


class ConfigError(SteerDecError, ValueError):
    pass


class CheckpointError(SteerDecError, ValueError):
    pass


class MissingArtifactError(SteerDecError, FileNotFoundError):
    def __init__(self, missing: list[str]) -> None:
        self.missing = list(missing)
        super().__init__("Missing artifacts: " + ", ".join(self.missing))
