"""
Exception types shared across the project.
Every error raised on purpose derives from FormGraphError so run.py can turn it into exit code 1.
"""

from typing import Optional, Sequence


class FormGraphError(Exception):
    """Root of all deliberate failures."""


class InvalidInputError(FormGraphError, ValueError):
    """Input rejected before any work was done (degenerate box, unnormalized coordinate, ...)."""


class ShapeError(FormGraphError, ValueError):
    def __init__(self, op: str, left: Sequence[int], right: Optional[Sequence[int]] = None, detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right) if right is not None else None
        msg = f"{op}: incompatible shapes {self.left}"
        if self.right is not None:
            msg += f" and {self.right}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ParseError(FormGraphError):
    def __init__(self, path: str, key: str, detail: str = ""):
        self.path = str(path)
        self.key = key
        msg = f"{self.path}: bad or missing '{key}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ConfigError(FormGraphError):
    """Bad configuration value, schema mismatch or incompatible checkpoint."""


class DecodeError(FormGraphError):
    """Tag sequence violates the BIOES transition rules."""


class GenerationError(FormGraphError):
    """Synthetic layout does not fit on the page."""


class OracleFailure(FormGraphError):
    def __init__(self, failures: Sequence[str]):
        self.failures = list(failures)
        super().__init__("oracle checks failed: " + ", ".join(self.failures))
