"""Exception hierarchy shared by all modules.

The CLI maps these onto stable exit codes, so new error conditions should
reuse one of the existing classes rather than invent a new one.
"""


class WormholeMamlError(Exception):
    """Base class for all package errors."""


class StructuralError(WormholeMamlError):
    """Shapes, tape membership or container layout violate a contract."""


class ContractError(WormholeMamlError):
    """A caller-supplied value breaks a documented precondition."""


class DomainError(WormholeMamlError):
    """Math op evaluated outside its domain (e.g. log of a non-positive)."""


class FormatError(WormholeMamlError):
    """A binary input file does not parse (bad magic, truncation)."""


class DataConsistencyError(FormatError):
    """Parsed files disagree with each other (e.g. image/label counts)."""


class SamplingError(WormholeMamlError):
    """A task sampler could not satisfy its constraints."""


class DegenerateInputError(WormholeMamlError):
    """An analysis formula is undefined for this input (e.g. all-zero z)."""


class ConfigError(WormholeMamlError):
    """Config file or override is invalid. Carries a line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingError(WormholeMamlError):
    """Training diverged or produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None, task_index: int | None = None):
        self.epoch = epoch
        self.task_index = task_index
        if epoch is not None:
            message = f"epoch {epoch}, task {task_index}: {message}"
        super().__init__(message)
