"""Exception hierarchy shared by every stage of the pipeline."""


class ValidationError(ValueError):
    """Base class for input/config problems; the CLI maps these to exit status 1."""


class ConfigError(ValidationError):
    pass


class IntegrityError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SplitError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class OptimizerError(ValidationError):
    pass


class TrainingError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


class DegenerateDirectionError(ValidationError):
    pass


class MissingArtifactError(ValidationError):
    def __init__(self, path, producer):
        super().__init__(f"missing artifact {path}; run the `{producer}` subcommand first")
        self.path = path
        self.producer = producer
