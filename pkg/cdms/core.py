from typing import Any, Dict, Iterable, Optional, Sequence, Tuple

from corider import Configs as _Configs

from cdms.utils.logging import getLogger

logger = getLogger(__name__)


class Configs(_Configs):
    """Configs module for holding project configurations.

    This is a wrapper of the Configs found as a stand-alone package in https://github.com/LukasHedegaard/co-rider
    """

    @staticmethod
    def collect(*classes: Any) -> "Configs":
        """Collect the configs of every given class that declares ``configs()``

        Returns:
            Configs: Aggregated configurations
        """
        c = Configs()
        for cls in classes:
            if hasattr(cls, "configs"):
                c += cls.configs()
        return c

    def default_values(self) -> Dict[str, Any]:
        return {k: v.default for k, v in self.values.items()}


class CdmsError(Exception):
    """Base class of every error raised on purpose by this package."""


class UserError(CdmsError):
    """Bad input from a user: malformed query, schema or config. CLI exit code 2."""

    exit_code = 2


class InvariantViolation(CdmsError):
    """An internal consistency check failed. CLI exit code 1."""

    exit_code = 1

    def __init__(self, message: str, trace: Optional[Sequence[str]] = None):
        super().__init__(message)
        self.trace = list(trace or [])


class ConfigError(UserError):
    pass


class SchemaTemplateError(UserError):
    pass


class RegistrationError(UserError):
    pass


class KindMismatchError(UserError):
    pass


class UnsupportedOperatorError(UserError):
    pass


class CqlSyntaxError(UserError):
    def __init__(
        self,
        message: str,
        line: int = 0,
        column: int = 0,
        expected: Iterable[str] = (),
        token: Optional[str] = None,
    ):
        super().__init__(message)
        self.line = line
        self.column = column
        self.expected = frozenset(expected)
        self.token = token


class QueryValidationError(UserError):
    def __init__(self, issues: Sequence[Any]):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


class DecisionError(UserError):
    pass


class MappingConflictError(UserError):
    def __init__(self, pairs: Sequence[Tuple[str, str]]):
        self.pairs = list(pairs)
        listed = ", ".join(f"{local}->{glob}" for local, glob in self.pairs)
        super().__init__(f"Conflicting confirmations: {listed}")


class UnknownDomainError(UserError):
    pass


class EmptyEntryError(CdmsError):
    pass


class UnknownPeerError(UserError):
    pass


class UnknownAttributeError(UserError):
    pass


class SnapshotError(UserError):
    pass
