from pathlib import Path
from typing import Iterable, Optional, Sequence


class PaneError(Exception):
    """Base error; `category` is the machine-parseable tag printed by the CLI"""

    category = "error"


class ConfigError(PaneError, ValueError):
    category = "config"


class DatasetFormatError(PaneError, ValueError):
    category = "dataset-format"

    def __init__(self, message: str, path: Optional[Path] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(f"{where}{message}")


class SplitError(PaneError, ValueError):
    category = "split"


class GraphError(PaneError, ValueError):
    category = "graph"


class ShapeMismatchError(PaneError, ValueError):
    category = "dimension-mismatch"

    def __init__(self, what: str, expected: Sequence[int], found: Sequence[int]):
        self.expected = tuple(expected)
        self.found = tuple(found)
        super().__init__(f"{what}: expected shape {self.expected}, found {self.found}")


class CheckpointError(PaneError):
    category = "checkpoint"


class UnknownUserError(PaneError, KeyError):
    category = "unknown-user"

    def __init__(self, ids: Iterable[str]):
        self.ids = list(ids)
        super().__init__(f"unknown user id(s): {', '.join(map(str, self.ids))}")

    def __str__(self) -> str:
        # KeyError would repr() the message
        return self.args[0]


class NonFiniteLossError(PaneError, ArithmeticError):
    category = "non-finite-loss"

    def __init__(self, message: str, dump_path: Optional[Path] = None):
        self.dump_path = dump_path
        if dump_path is not None:
            message = f"{message} (batch dumped to {dump_path})"
        super().__init__(message)


class GradientError(PaneError, RuntimeError):
    category = "gradient"
