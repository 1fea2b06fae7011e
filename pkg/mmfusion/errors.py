"""
Exception hierarchy shared by every pipeline stage.

Each class carries the exit code the management commands report, so a
command only has to catch MMFusionError and forward ``exit_code``.
"""

from typing import Optional


class MMFusionError(Exception):
    exit_code: int = 1
    kind: str = "error"

    def error_line(self) -> str:
        """One machine-parseable line: kind=<kind> code=<exit code> msg=<message>."""
        msg = " ".join(str(self).split())
        return f"kind={self.kind} code={self.exit_code} msg={msg}"


class ConfigError(MMFusionError):
    kind = "config"


class ShapeError(ConfigError, ValueError):
    kind = "shape"


class DomainError(MMFusionError, ValueError):
    kind = "domain"


class ParamLookupError(MMFusionError, KeyError):
    kind = "lookup"

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class FormatError(MMFusionError):
    exit_code = 2
    kind = "format"

    def __init__(self, message: str, *, path: Optional[str] = None, offset: Optional[int] = None):
        self.path = path
        self.offset = offset
        parts = [message]
        if path is not None:
            parts.append(f"path={path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts))


class DataError(FormatError):
    kind = "data"


class NumericError(MMFusionError, ArithmeticError):
    exit_code = 3
    kind = "numeric"


class OracleError(NumericError):
    kind = "oracle"


class TrainingError(NumericError):
    kind = "training"

    def __init__(self, message: str, *, step: int):
        self.step = step
        super().__init__(f"{message} step={step}")
